"""Reverse pass, static gradient scaling and memory accounting."""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass

import numpy as np

from ..errors import DetachedLoss, NonFiniteGradient, NonScalarLoss
from .tensor import PRIMITIVES, Precision, Tape, Tensor, _state, enable_grad, no_grad, precision


class ScaleMode(str, enum.Enum):
    FIRST_ORDER = "FIRST_ORDER"
    SECOND_ORDER = "SECOND_ORDER"


DEFAULT_SCALES = {ScaleMode.FIRST_ORDER: 2.0**16, ScaleMode.SECOND_ORDER: 2.0**8}


@dataclass
class GradScaler:
    """Static loss scale. Defaults: 2^16 first order, 2^8 second order."""

    mode: ScaleMode = ScaleMode.FIRST_ORDER
    scale: float | None = None

    def __post_init__(self):
        self.mode = ScaleMode(self.mode)
        if self.scale is None:
            self.scale = DEFAULT_SCALES[self.mode]
        self.scale = float(self.scale)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"gradient scale must be finite and positive, got {self.scale}")
        mantissa, _ = np.frexp(self.scale)
        if mantissa != 0.5:
            raise ValueError(f"gradient scale must be a power of two, got {self.scale}")


@contextlib.contextmanager
def _recording(tape: Tape):
    _state.tapes.append(tape)
    try:
        with enable_grad():
            yield
    finally:
        _state.tapes.pop()


def backward(
    loss: Tensor,
    params,
    create_graph: bool = False,
    retain_graph: bool | None = None,
    seed: float = 1.0,
) -> list[Tensor]:
    """Return dloss/dparam for each param, in order.

    With ``create_graph`` the returned gradients live on the tape and can be
    differentiated again. The tape is freed afterwards unless the graph is
    retained (``retain_graph`` defaults to ``create_graph``).
    """
    if not isinstance(loss, Tensor) or loss.node is None or loss.tape is None or loss.tape.freed:
        raise DetachedLoss("loss is not attached to a live tape")
    if loss.data.size != 1 or loss.ndim > 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    retain = create_graph if retain_graph is None else retain_graph
    param_ids = {id(p): i for i, p in enumerate(params)}
    found: dict[int, Tensor] = {}
    grads: dict[int, Tensor] = {id(loss): Tensor(np.full(loss.shape, seed))}
    ctx = _recording(tape) if create_graph else no_grad()
    with ctx:
        for node in reversed(tape.nodes[: loss.node.index + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in param_ids:
                found[id(node.out)] = g
            in_grads = PRIMITIVES[node.kind].backward(node, g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                on_tape = inp.node is not None and inp.tape is tape
                bucket = grads if on_tape else found
                bucket[key] = gi if key not in bucket else bucket[key] + gi
            if not create_graph:
                _account_transient(tape, grads, found)
    out = []
    for p in params:
        g = found.get(id(p))
        out.append(g if g is not None else Tensor(np.zeros(p.shape)))
    if not retain:
        tape.free()
    return out


def _account_transient(tape: Tape, *buckets):
    by_key = {"fp32": 0, "fp16": 0}
    for bucket in buckets:
        for t in bucket.values():
            if t.node is None:
                by_key["fp16" if t.precision is Precision.FP16EMU else "fp32"] += t.precision.nbytes * t.size
    total = by_key["fp32"] + by_key["fp16"]
    if tape.live_total + total > tape.peak_total:
        peak = dict(tape.live)
        peak["fp32"] += by_key["fp32"]
        peak["fp16"] += by_key["fp16"]
        tape.peak = peak


def _check_finite(grads, what: str, scale: float):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteGradient(
                f"non-finite {what} in parameter {i} at static scale {scale:g}; lower the gradient scale"
            )


def scaled_backward(
    loss: Tensor,
    params,
    scaler: GradScaler,
    create_graph: bool = False,
    retain_graph: bool | None = None,
) -> list[Tensor]:
    """Backpropagate ``scale * loss`` with every kernel at emulated FP16.

    Returns the still-scaled gradients. Raises NonFiniteGradient if any value
    overflowed.
    """
    with precision(Precision.FP16EMU):
        grads = backward(loss, params, create_graph=create_graph, retain_graph=retain_graph, seed=scaler.scale)
    _check_finite(grads, "scaled gradient", scaler.scale)
    return grads


def unscale(grads, scaler: GradScaler) -> list[Tensor]:
    """Divide by the scale at working precision (exact for powers of two)."""
    inv = 1.0 / scaler.scale
    with precision(Precision.FP32):
        return [g * inv if g.requires_grad else Tensor(g.data * inv) for g in grads]


def peak_bytes(tape: Tape) -> dict:
    """Peak simultaneously-live bytes seen by ``tape``, split by category."""
    p = tape.peak
    return {"fp32": p["fp32"], "fp16": p["fp16"], "params": p["params"], "total": sum(p.values())}
