"""Network-level operations composed from the differentiable primitives."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch, UnknownPrimitive
from .tensor import Precision, Tensor, _exact_constant, apply, as_tensor, precision


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N, in) against weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    y = apply("matmul", x, apply("transpose", weight, axes=(1, 0)))
    return bias_add(y, bias) if bias is not None else y


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeMismatch(f"bias_add: input {x.shape} vs bias {bias.shape}")
    shape = (1, bias.shape[0]) + (1,) * (x.ndim - 2)
    return apply("add", x, apply("reshape", bias, shape=shape))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution with square kernels, via im2col + matmul."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or x.shape[1] != cin:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    n, _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = apply("im2col", x, k=k, stride=stride, pad=padding)
    wmat = apply("reshape", weight, shape=(cout, cin * k * k))
    y = apply("matmul", cols, apply("transpose", wmat, axes=(1, 0)))
    y = apply("reshape", y, shape=(n, ho, wo, cout))
    y = apply("transpose", y, axes=(0, 3, 1, 2))
    return bias_add(y, bias) if bias is not None else y


def relu(x: Tensor) -> Tensor:
    return apply("relu", x)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", a, b)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis but 1.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm: {c} channels vs affine {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, c) + (1,) * (x.ndim - 2)
    g = apply("reshape", gamma, shape=shape)
    b = apply("reshape", beta, shape=shape)
    if training:
        m = x.data.size // c
        mean = apply("mul_scalar", apply("sum", x, axis=axes, keepdims=True), c=1.0 / m)
        xc = apply("sub", x, mean)
        var = apply("mul_scalar", apply("sum", apply("mul", xc, xc), axis=axes, keepdims=True), c=1.0 / m)
        std = apply("sqrt", apply("add_scalar", var, c=eps))
        xhat = apply("div", xc, std)
        unbiased = var.data.reshape(c) * (m / max(m - 1, 1))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.data.reshape(c)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mean = Tensor(running_mean.reshape(shape))
        inv = Tensor((1.0 / np.sqrt(running_var + eps)).reshape(shape))
        xhat = apply("mul", apply("sub", x, mean), inv)
    return apply("add", apply("mul", xhat, g), b)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return apply("mul_scalar", apply("sum", x, axis=(2, 3), keepdims=False), c=1.0 / hw)


def flatten(x: Tensor) -> Tensor:
    return apply("reshape", x, shape=(x.shape[0], int(np.prod(x.shape[1:]))))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(logits).

    The row max is subtracted as a constant, which leaves value and all
    derivatives unchanged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    onehot = _exact_constant(onehot)
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = apply("sub", logits, shift)
    lse = apply("log", apply("sum", apply("exp", z), axis=(1,), keepdims=False))
    picked = apply("sum", apply("mul", z, onehot), axis=(1,), keepdims=False)
    return apply("mul_scalar", apply("sum", apply("sub", lse, picked), axis=None), c=1.0 / n)


_COMPOSITES = {
    "matmul": matmul,
    "conv2d": conv2d,
    "bias_add": bias_add,
    "add": add,
    "mul": mul,
    "relu": relu,
    "batch_norm": batch_norm,
    "global_avg_pool": global_avg_pool,
    "flatten": flatten,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def primitive_forward(kind: str, inputs, prec: Precision | str = Precision.FP32, **attrs) -> Tensor:
    """Run one network-level operation at the given precision."""
    try:
        fn = _COMPOSITES[kind]
    except KeyError:
        raise UnknownPrimitive(kind) from None
    args = list(inputs)
    if kind in ("softmax_cross_entropy", "batch_norm"):
        args[:3 if kind == "batch_norm" else 1] = [as_tensor(x) for x in args[:3 if kind == "batch_norm" else 1]]
    else:
        args = [as_tensor(x) for x in args]
    with precision(prec):
        return fn(*args, **attrs)
