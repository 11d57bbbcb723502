"""Reverse-mode autodiff with second-order support and emulated FP16."""

from .fp16 import FP16_MAX, round_fp16, round_fp32
from .functional import (
    batch_norm,
    bias_add,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    primitive_forward,
    relu,
    softmax_cross_entropy,
)
from .grad import GradScaler, ScaleMode, backward, peak_bytes, scaled_backward, unscale
from .tensor import (
    PRIMITIVES,
    Precision,
    Primitive,
    Tape,
    Tensor,
    apply,
    as_tensor,
    current_precision,
    no_grad,
    precision,
    register,
)

__all__ = [
    "FP16_MAX",
    "GradScaler",
    "PRIMITIVES",
    "Precision",
    "Primitive",
    "ScaleMode",
    "Tape",
    "Tensor",
    "apply",
    "as_tensor",
    "backward",
    "batch_norm",
    "bias_add",
    "conv2d",
    "current_precision",
    "flatten",
    "global_avg_pool",
    "linear",
    "no_grad",
    "peak_bytes",
    "precision",
    "primitive_forward",
    "register",
    "relu",
    "round_fp16",
    "round_fp32",
    "scaled_backward",
    "softmax_cross_entropy",
    "unscale",
]
