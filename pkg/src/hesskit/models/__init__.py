"""Model zoo: architectures, channel groups, training and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .groups import ChannelGroup, channel_groups, count_params_flops
from .training import Dataset, History, TrainConfig, cosine_lr, sgd_epochs, train
from .zoo import Layer, Model, ModelSpec, accuracy, build_model, layer_plan, predict

__all__ = [
    "ChannelGroup",
    "Dataset",
    "History",
    "Layer",
    "Model",
    "ModelSpec",
    "TrainConfig",
    "accuracy",
    "build_model",
    "channel_groups",
    "cosine_lr",
    "count_params_flops",
    "layer_plan",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "sgd_epochs",
    "train",
]
