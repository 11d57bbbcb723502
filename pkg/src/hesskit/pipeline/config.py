"""Pipeline configuration: a TOML file flattened to dotted keys.

Every key is typed and documented in ``DEFAULTS``; unknown keys are errors.
Table defaults follow the published training, pruning and quantization
setups; epoch counts are desk-scale.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass

from ..errors import ConfigInvalid, InvalidSpec
from ..hutchinson import PrecisionMode
from ..models.training import TrainConfig
from ..models.zoo import ARCHITECTURES, ModelSpec
from .datasets import FORMATS, DatasetSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

# key -> (type, default); a type of list means a list of ints
DEFAULTS: dict[str, tuple] = {
    "model.architecture": (str, "SmallConvNet"),
    "model.widths": (list, [24, 48]),  # MLP: hidden widths only
    "dataset.kind": (str, "synthetic-blobs"),
    "dataset.n": (int, 2000),
    "dataset.classes": (int, 4),
    "dataset.dims": (int, 2),
    "dataset.image_shape": (list, [3, 8, 8]),  # [] for flat synthetic-blobs
    "dataset.noise": (float, 2.5),
    "dataset.test_fraction": (float, 0.25),
    "dataset.path": (str, ""),
    "dataset.labels_path": (str, ""),
    "train.epochs": (int, 15),
    "train.batch_size": (int, 128),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-3),
    "train.initial_lr": (float, 0.05),
    "finetune.epochs": (int, 15),
    "finetune.batch_size": (int, 128),
    "finetune.momentum": (float, 0.9),
    "finetune.weight_decay": (float, 1e-3),
    "finetune.initial_lr": (float, 0.01),
    "qat.epochs": (int, 3),
    "qat.batch_size": (int, 128),
    "qat.momentum": (float, 0.9),
    "qat.weight_decay": (float, 1e-4),
    "qat.initial_lr": (float, 1e-4),
    "qat.scheme": (str, "Uniform8"),
    "qat.act_momentum": (float, 0.99),
    "hutchinson.n_v": (int, 300),
    "hutchinson.hessian_batch_size": (int, 512),
    "hutchinson.mode": (str, "fp32"),
    "hutchinson.first_scale": (float, 65536.0),
    "hutchinson.second_scale": (float, 256.0),
    "pruning.target_compression": (float, 0.10),
    "pruning.prune_ratio_limit": (float, 0.95),
    "seeds.init": (int, 0),
    "seeds.data": (int, 0),
    "seeds.train": (int, 0),
    "seeds.hutchinson": (int, 0),
    "output.dir": (str, "runs/ref"),
}

FILE_KINDS = ("idx-images", "cifar10-binary")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    kind = DEFAULTS[key][0]
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
            raise ConfigInvalid(key, f"expected a list of integers, got {value!r}")
        return list(value)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigInvalid(key, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


@dataclass
class PipelineConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def _train(self, section: str) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self[f"{section}.epochs"],
                batch_size=self[f"{section}.batch_size"],
                momentum=self[f"{section}.momentum"],
                weight_decay=self[f"{section}.weight_decay"],
                initial_lr=self[f"{section}.initial_lr"],
            )
        except InvalidSpec as exc:
            raise ConfigInvalid(section, str(exc)) from None

    @property
    def train(self) -> TrainConfig:
        return self._train("train")

    @property
    def finetune(self) -> TrainConfig:
        return self._train("finetune")

    @property
    def qat(self) -> TrainConfig:
        return self._train("qat")

    @property
    def mode(self) -> PrecisionMode:
        return PrecisionMode.parse(self["hutchinson.mode"])

    @property
    def scales(self) -> dict:
        return {"first": self["hutchinson.first_scale"], "second": self["hutchinson.second_scale"]}

    @property
    def out_dir(self) -> str:
        return self["output.dir"]

    def dataset_spec(self) -> DatasetSpec:
        shape = self["dataset.image_shape"]
        return DatasetSpec(
            kind=self["dataset.kind"],
            n=self["dataset.n"],
            classes=self["dataset.classes"],
            seed=self["seeds.data"],
            dims=self["dataset.dims"],
            image_shape=tuple(shape) if shape else None,
            noise=self["dataset.noise"],
            test_fraction=self["dataset.test_fraction"],
            path=self["dataset.path"] or None,
            labels_path=self["dataset.labels_path"] or None,
        )

    def model_spec(self, num_classes: int, input_shape: tuple) -> ModelSpec:
        arch = self["model.architecture"]
        widths = list(self["model.widths"])
        try:
            if arch == "MLP":
                n_in = 1
                for s in input_shape:
                    n_in *= int(s)
                return ModelSpec("MLP", tuple([n_in] + widths + [num_classes]), num_classes, (n_in,))
            return ModelSpec(arch, tuple(widths), num_classes, tuple(input_shape))
        except InvalidSpec as exc:
            raise ConfigInvalid("model.widths", str(exc)) from None

    def to_dict(self) -> dict:
        return dict(self.values)


def validate(values: dict) -> PipelineConfig:
    cfg = PipelineConfig(values)
    if values["model.architecture"] not in ARCHITECTURES:
        raise ConfigInvalid("model.architecture", f"must be one of {', '.join(ARCHITECTURES)}")
    if values["dataset.kind"] not in FORMATS:
        raise ConfigInvalid("dataset.kind", f"must be one of {', '.join(FORMATS)}")
    if values["dataset.kind"] in FILE_KINDS and not values["dataset.path"]:
        raise ConfigInvalid("dataset.path", f"required for dataset kind {values['dataset.kind']}")
    if values["dataset.kind"] == "idx-images" and not values["dataset.labels_path"]:
        raise ConfigInvalid("dataset.labels_path", "required for dataset kind idx-images")
    if not 0 < values["dataset.test_fraction"] < 1:
        raise ConfigInvalid("dataset.test_fraction", "must be in (0, 1)")
    if values["dataset.n"] < 2:
        raise ConfigInvalid("dataset.n", "must be >= 2")
    if values["hutchinson.n_v"] < 1:
        raise ConfigInvalid("hutchinson.n_v", "must be >= 1")
    if values["hutchinson.hessian_batch_size"] < 1:
        raise ConfigInvalid("hutchinson.hessian_batch_size", "must be >= 1")
    try:
        PrecisionMode.parse(values["hutchinson.mode"])
    except ValueError:
        raise ConfigInvalid("hutchinson.mode", "must be fp32 or fp16") from None
    for key in ("hutchinson.first_scale", "hutchinson.second_scale"):
        s = values[key]
        if not s > 0 or s != 2.0 ** round(math.log2(s)):
            raise ConfigInvalid(key, "must be a positive power of two")
    if not 0 < values["pruning.target_compression"] < 1:
        raise ConfigInvalid("pruning.target_compression", "must be in (0, 1)")
    if not 0 < values["pruning.prune_ratio_limit"] <= 1:
        raise ConfigInvalid("pruning.prune_ratio_limit", "must be in (0, 1]")
    if values["qat.scheme"] != "Uniform8":
        raise ConfigInvalid("qat.scheme", "only Uniform8 is supported")
    if values["qat.act_momentum"] != 0.99:
        # the observer momentum is fixed by the quantizer implementation
        raise ConfigInvalid("qat.act_momentum", "only 0.99 is supported")
    if not values["model.widths"]:
        raise ConfigInvalid("model.widths", "must not be empty")
    for section in ("train", "finetune", "qat"):
        cfg._train(section)
    if not values["output.dir"]:
        raise ConfigInvalid("output.dir", "must not be empty")
    return cfg


def build_config(raw: dict | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Merge defaults, a parsed (nested or flat) mapping and CLI overrides."""
    values = {k: v for k, (_, v) in DEFAULTS.items()}
    values = {k: list(v) if isinstance(v, list) else v for k, v in values.items()}
    for source in (raw or {}, overrides or {}):
        for key, value in _flatten(source).items():
            if key not in DEFAULTS:
                raise ConfigInvalid(key, "unknown configuration key")
            values[key] = _coerce(key, value)
    return validate(values)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigInvalid("--config", f"file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid("--config", f"parse error: {exc}") from None
    return build_config(raw, overrides)
