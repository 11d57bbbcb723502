"""Config, dataset ingestion, stage orchestration and the command-line interface."""

from .config import DEFAULTS, PipelineConfig, build_config, load_config
from .datasets import DatasetSpec, DatasetSplit, load_dataset, read_cifar10_binary, read_idx

__all__ = [
    "DEFAULTS",
    "DatasetSpec",
    "DatasetSplit",
    "PipelineConfig",
    "build_config",
    "load_config",
    "load_dataset",
    "read_cifar10_binary",
    "read_idx",
]
