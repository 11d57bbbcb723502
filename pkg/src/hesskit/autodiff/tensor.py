"""Tape-based reverse-mode autodiff over numpy arrays.

Every backward rule is written with the same differentiable primitives used
in the forward pass, so differentiating a gradient (``create_graph=True``)
records ordinary nodes and a second backward works without special cases.
"""

from __future__ import annotations

import contextlib
import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch, UnknownPrimitive
from .fp16 import round_fp16


class Precision(str, enum.Enum):
    FP32 = "FP32"
    FP16EMU = "FP16EMU"

    @property
    def nbytes(self) -> int:
        return 2 if self is Precision.FP16EMU else 4


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.precision = Precision.FP32
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape | None:
    return _state.tapes[-1] if _state.tapes else None


def current_precision() -> Precision:
    return _state.precision


@contextlib.contextmanager
def precision(prec: Precision | str):
    """Run primitives inside the block at the given precision."""
    prev = _state.precision
    _state.precision = Precision(prec)
    try:
        yield
    finally:
        _state.precision = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    attrs: dict
    out: Tensor
    index: int
    nbytes: int


@dataclass(eq=False)
class Tape:
    """Append-only record of executed primitives.

    Byte accounting follows the mixed-precision convention: every recorded
    output is a value saved for backward and costs 2 or 4 bytes per element
    depending on its precision tag, and each leaf parameter seen by the tape
    costs 4 bytes per element (FP32 master copy).
    """

    nodes: list = field(default_factory=list)
    freed: bool = False
    live: dict = field(default_factory=lambda: {"fp32": 0, "fp16": 0, "params": 0})
    peak: dict = field(default_factory=lambda: {"fp32": 0, "fp16": 0, "params": 0})
    _leaf_ids: set = field(default_factory=set)

    def __enter__(self) -> Tape:
        if self.freed:
            raise RuntimeError("cannot re-enter a freed tape")
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)

    @property
    def live_total(self) -> int:
        return sum(self.live.values())

    @property
    def peak_total(self) -> int:
        return sum(self.peak.values())

    def _bump(self, transient: int = 0, transient_key: str = "fp32"):
        total = self.live_total + transient
        if total > self.peak_total:
            self.peak = dict(self.live)
            self.peak[transient_key] += transient

    def record(self, kind, inputs, attrs, out: Tensor) -> Node:
        for t in inputs:
            if t.node is None and t.requires_grad and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self.live["params"] += 4 * t.data.size
        key = "fp16" if out.precision is Precision.FP16EMU else "fp32"
        nbytes = out.precision.nbytes * out.data.size
        node = Node(kind, tuple(inputs), attrs, out, len(self.nodes), nbytes)
        self.nodes.append(node)
        self.live[key] += nbytes
        self._bump()
        return node

    def mark(self) -> int:
        return len(self.nodes)

    def rewind(self, mark: int) -> None:
        """Drop every node recorded after ``mark``."""
        for node in self.nodes[mark:]:
            key = "fp16" if node.out.precision is Precision.FP16EMU else "fp32"
            self.live[key] -= node.nbytes
            node.out.node = None
        del self.nodes[mark:]

    def free(self) -> None:
        self.rewind(0)
        self.freed = True


class Tensor:
    """n-d array stored at float64 working precision with a precision tag."""

    __slots__ = ("data", "requires_grad", "node", "precision", "name", "tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, precision=Precision.FP32, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.precision = Precision(precision)
        if self.precision is Precision.FP16EMU:
            arr = round_fp16(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self):
        return None if self.node is None else (id(self.tape), self.node.index)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.node = None
        t.tape = None
        t.precision = self.precision
        t.name = self.name
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision.value}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        if _is_scalar(other):
            return apply("add_scalar", self, c=float(other))
        return apply("add", self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return apply("add_scalar", self, c=-float(other))
        return apply("sub", self, as_tensor(other))

    def __rsub__(self, other):
        if _is_scalar(other):
            return apply("add_scalar", apply("neg", self), c=float(other))
        return apply("sub", as_tensor(other), self)

    def __mul__(self, other):
        if _is_scalar(other):
            return apply("mul_scalar", self, c=float(other))
        return apply("mul", self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            return apply("mul_scalar", self, c=1.0 / float(other))
        return apply("div", self, as_tensor(other))

    def __rtruediv__(self, other):
        return apply("div", as_tensor(other), self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False):
        if axis is not None and not isinstance(axis, tuple):
            axis = (axis,)
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return apply("transpose", self, axes=tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def relu(self):
        return apply("relu", self)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def sqrt(self):
        return apply("sqrt", self)


def _exact_constant(arr: np.ndarray) -> Tensor:
    """Constant whose values are already binary16-representable (e.g. 0/1 masks)."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.node = None
    t.tape = None
    t.precision = Precision.FP16EMU
    t.name = None
    return t


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive registry

class Primitive:
    """A differentiable primitive.

    ``forward`` maps float64 arrays to a float64 array. ``backward`` receives
    the node and the upstream gradient as a Tensor and returns one Tensor (or
    None) per input, built from primitives so it is itself differentiable.
    """

    name = ""
    # output values are a selection/sign flip of the inputs, so narrowed
    # inputs give narrowed outputs without a second rounding pass
    exact = False

    def forward(self, *arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, node: Node, grad: Tensor) -> tuple:
        raise NotImplementedError


PRIMITIVES: dict[str, Primitive] = {}


def register(cls):
    PRIMITIVES[cls.name] = cls()
    return cls


def apply(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Execute primitive ``kind`` and record it on the active tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitive(kind) from None
    prec = _state.precision
    narrow = prec is Precision.FP16EMU
    if narrow:
        # 0-d values are loss-level scalars; like autocast reductions they stay wide
        arrays = [
            round_fp16(x.data) if x.precision is Precision.FP32 and x.data.ndim > 0 else x.data
            for x in inputs
        ]
    else:
        arrays = [x.data for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value = np.asarray(prim.forward(*arrays, **attrs), dtype=np.float64)
    if narrow and value.ndim > 0:
        # exact primitives only preserve representability of narrowed inputs;
        # a wide 0-d input (e.g. a loss-level seed being broadcast) still needs rounding
        if not prim.exact or any(x.data.ndim == 0 and x.precision is Precision.FP32 for x in inputs):
            value = round_fp16(value)
    else:
        prec = Precision.FP32
    out = Tensor.__new__(Tensor)
    out.data = value
    out.precision = prec
    out.node = None
    out.tape = None
    out.name = None
    needs = _state.grad_enabled and any(x.requires_grad for x in inputs)
    out.requires_grad = False
    tape = current_tape()
    if tape is None and needs:
        # extend the graph an input already lives on
        tape = next((x.tape for x in inputs if x.tape is not None and not x.tape.freed), None)
    if needs and tape is not None:
        out.requires_grad = True
        out.tape = tape
        out.node = tape.record(kind, inputs, attrs, out)
    return out


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return apply("sum_to", g, shape=tuple(shape))


def _unbroadcast_shape(arr: np.ndarray, shape: tuple) -> np.ndarray:
    shape = tuple(shape)
    lead = arr.ndim - len(shape)
    if lead < 0:
        raise ShapeMismatch(f"cannot sum {arr.shape} to {shape}")
    out = arr.sum(axis=tuple(range(lead))) if lead else arr
    axes = tuple(i for i, (a, s) in enumerate(zip(out.shape, shape)) if s == 1 and a != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ShapeMismatch(f"cannot sum {arr.shape} to {shape}")
    return out


def _broadcast_check(a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} do not broadcast") from None


@register
class Add(Primitive):
    name = "add"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a + b

    def backward(self, node, g):
        a, b = node.inputs
        return _sum_to(g, a.shape), _sum_to(g, b.shape)


@register
class Sub(Primitive):
    name = "sub"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a - b

    def backward(self, node, g):
        a, b = node.inputs
        return _sum_to(g, a.shape), _sum_to(apply("neg", g), b.shape)


@register
class Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a * b

    def backward(self, node, g):
        a, b = node.inputs
        ga = _sum_to(apply("mul", g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(apply("mul", g, a), b.shape) if b.requires_grad else None
        return ga, gb


@register
class Div(Primitive):
    name = "div"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a / b

    def backward(self, node, g):
        a, b = node.inputs
        ga = _sum_to(apply("div", g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            # d(a/b)/db = -a/b^2 = -(a/b)/b
            gb = _sum_to(apply("neg", apply("div", apply("mul", g, node.out), b)), b.shape)
        return ga, gb


@register
class Neg(Primitive):
    name = "neg"
    exact = True

    def forward(self, a):
        return -a

    def backward(self, node, g):
        return (apply("neg", g),)


@register
class MulScalar(Primitive):
    """Multiplication by a Python constant. The constant is not narrowed."""

    name = "mul_scalar"

    def forward(self, a, c):
        return a * c

    def backward(self, node, g):
        return (apply("mul_scalar", g, c=node.attrs["c"]),)


@register
class AddScalar(Primitive):
    name = "add_scalar"

    def forward(self, a, c):
        return a + c

    def backward(self, node, g):
        return (g,)


@register
class MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, node, g):
        a, b = node.inputs
        ga = apply("matmul", g, apply("transpose", b, axes=(1, 0))) if a.requires_grad else None
        gb = apply("matmul", apply("transpose", a, axes=(1, 0)), g) if b.requires_grad else None
        return ga, gb


@register
class Transpose(Primitive):
    name = "transpose"
    exact = True

    def forward(self, a, axes):
        if len(axes) != a.ndim:
            raise ShapeMismatch(f"transpose axes {axes} for rank {a.ndim}")
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, node, g):
        inv = tuple(np.argsort(node.attrs["axes"]))
        return (apply("transpose", g, axes=inv),)


@register
class Reshape(Primitive):
    name = "reshape"
    exact = True

    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, node, g):
        return (apply("reshape", g, shape=node.inputs[0].shape),)


@register
class Sum(Primitive):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, node, g):
        (a,) = node.inputs
        axis, keepdims = node.attrs.get("axis"), node.attrs.get("keepdims", False)
        if not keepdims:
            if axis is None:
                kept = (1,) * a.ndim
            else:
                ax = {x % a.ndim for x in axis}
                kept = tuple(1 if i in ax else s for i, s in enumerate(a.shape))
            g = apply("reshape", g, shape=kept)
        return (apply("broadcast_to", g, shape=a.shape),)


@register
class SumTo(Primitive):
    name = "sum_to"

    def forward(self, a, shape):
        return _unbroadcast_shape(a, shape)

    def backward(self, node, g):
        return (apply("broadcast_to", g, shape=node.inputs[0].shape),)


@register
class BroadcastTo(Primitive):
    name = "broadcast_to"
    exact = True

    def forward(self, a, shape):
        try:
            return np.array(np.broadcast_to(a, shape))
        except ValueError:
            raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from None

    def backward(self, node, g):
        return (_sum_to(g, node.inputs[0].shape),)


@register
class Relu(Primitive):
    name = "relu"
    exact = True

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, node, g):
        mask = _exact_constant((node.inputs[0].data > 0).astype(np.float64))
        return (apply("mul", g, mask),)


@register
class Exp(Primitive):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, node, g):
        return (apply("mul", g, node.out),)


@register
class Log(Primitive):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def backward(self, node, g):
        return (apply("div", g, node.inputs[0]),)


@register
class Sqrt(Primitive):
    name = "sqrt"

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, node, g):
        return (apply("mul_scalar", apply("div", g, node.out), c=0.5),)


# ---------------------------------------------------------------------------
# convolution as a linear gather (im2col) and its adjoint (col2im)

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _out_hw(shape, k, stride, pad):
    _, _, h, w = shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {k} too large for input {shape} with padding {pad}")
    return ho, wo


@register
class Im2Col(Primitive):
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k), rows ordered (n, i, j)."""

    name = "im2col"
    exact = True

    def forward(self, x, k, stride, pad):
        if x.ndim != 4:
            raise ShapeMismatch(f"im2col expects NCHW input, got {x.shape}")
        n, c = x.shape[:2]
        ho, wo = _out_hw(x.shape, k, stride, pad)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        out = np.empty((n, ho, wo, c, k, k))
        for i in range(k):
            for j in range(k):
                out[:, :, :, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(0, 2, 3, 1)
        return out.reshape(n * ho * wo, c * k * k)

    def backward(self, node, g):
        x = node.inputs[0]
        return (apply("col2im", g, x_shape=x.shape, **node.attrs),)


@register
class Col2Im(Primitive):
    name = "col2im"

    def forward(self, cols_arr, x_shape, k, stride, pad):
        n, c, h, w = x_shape
        ho, wo = _out_hw(x_shape, k, stride, pad)
        patches = cols_arr.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
        if pad:
            xp = xp[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(xp)

    def backward(self, node, g):
        a = node.attrs
        return (apply("im2col", g, k=a["k"], stride=a["stride"], pad=a["pad"]),)
