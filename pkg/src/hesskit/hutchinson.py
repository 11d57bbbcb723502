"""Stochastic Hessian-trace estimation in FP32 and loss-scaled emulated FP16.

The FP16 path follows the loss-scaling recipe: first-order gradients come
from a scaled FP16 backward (scale 2^16) and are unscaled; the Hessian-vector
product is then a second scaled FP16 backward (scale 2^8) whose scale is
deliberately left in the result, since channel ranking only needs relative
traces.
"""

from __future__ import annotations

import enum
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .autodiff import (
    GradScaler,
    Precision,
    ScaleMode,
    Tape,
    Tensor,
    backward,
    peak_bytes,
    precision,
    scaled_backward,
    softmax_cross_entropy,
    unscale,
)
from .errors import NonFiniteGradient, NonFiniteHvp
from .models.groups import ChannelGroup, channel_groups
from .models.zoo import Model
from .report import canonical_json


class PrecisionMode(str, enum.Enum):
    FP32 = "FP32"
    FP16_SCALED = "FP16_SCALED"

    @classmethod
    def parse(cls, value) -> PrecisionMode:
        if isinstance(value, cls):
            return value
        aliases = {"fp32": cls.FP32, "fp16": cls.FP16_SCALED, "fp16_scaled": cls.FP16_SCALED}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown precision mode {value!r}") from None


@dataclass
class HessianBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1 or len(self.inputs) != len(self.labels):
            raise ValueError("Hessian batch needs at least one input/label pair")

    @property
    def size(self) -> int:
        return len(self.labels)


def rademacher(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Vector of independent +/-1 entries."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0


def _flatten(tensors) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in tensors])


def _split(vec: np.ndarray, params) -> list[Tensor]:
    out, pos = [], 0
    for p in params:
        out.append(Tensor(vec[pos:pos + p.size].reshape(p.shape)))
        pos += p.size
    return out


def first_order_grads(loss: Tensor, params, mode: PrecisionMode, first_scaler: GradScaler | None = None) -> list[Tensor]:
    """Differentiable gradients of ``loss`` (kept on the tape)."""
    if mode is PrecisionMode.FP32:
        return backward(loss, params, create_graph=True)
    scaler = first_scaler or GradScaler(ScaleMode.FIRST_ORDER)
    sg = scaled_backward(loss, params, scaler, create_graph=True)
    return unscale(sg, scaler)


def hvp(
    loss: Tensor,
    params,
    v: np.ndarray,
    mode: PrecisionMode | str = PrecisionMode.FP32,
    scaler: GradScaler | None = None,
    grads: list[Tensor] | None = None,
) -> np.ndarray:
    """Hessian-vector product of ``loss`` w.r.t. ``params`` (flattened).

    In FP16_SCALED mode the result is ``s * H v`` with the second-order scale
    ``s`` (default 2^8) still applied.
    """
    mode = PrecisionMode.parse(mode)
    v = np.asarray(v, dtype=np.float64)
    n = sum(p.size for p in params)
    if v.shape != (n,):
        raise ValueError(f"v has shape {v.shape}, expected ({n},)")
    if grads is None:
        try:
            grads = first_order_grads(loss, params, mode)
        except NonFiniteGradient as exc:
            raise NonFiniteHvp(str(exc)) from exc
    tape = loss.tape
    mark = tape.mark()
    try:
        with precision(Precision.FP32):
            gv = None
            for g, vi in zip(grads, _split(v, params)):
                term = (g * vi).sum()
                gv = term if gv is None else gv + term
        if mode is PrecisionMode.FP32:
            hv = backward(gv, params, retain_graph=True)
        else:
            second = scaler or GradScaler(ScaleMode.SECOND_ORDER)
            try:
                hv = scaled_backward(gv, params, second, retain_graph=True)
            except NonFiniteGradient as exc:
                raise NonFiniteHvp(str(exc)) from exc
        return _flatten(hv)
    finally:
        tape.rewind(mark)


def model_loss(model: Model, batch: HessianBatch, params: dict, mode: PrecisionMode) -> Tensor:
    """Evaluation-mode cross-entropy; FP16_SCALED runs the forward in FP16."""
    prec = Precision.FP16EMU if mode is PrecisionMode.FP16_SCALED else Precision.FP32
    with precision(prec):
        logits = model.forward(batch.inputs, params=params, training=False)
        return softmax_cross_entropy(logits, batch.labels)


@dataclass
class TraceReport:
    n_v: int
    global_trace_estimate: float
    per_channel_trace: dict
    per_iteration_values: list
    precision_mode: PrecisionMode
    second_order_scale_applied: float
    residue_trace: float
    instrumentation: dict = field(default_factory=dict)
    per_channel_iterations: np.ndarray | None = field(default=None, repr=False)

    @property
    def std(self) -> float:
        vals = np.asarray(self.per_iteration_values)
        return float(vals.std(ddof=1)) if vals.size > 1 else 0.0

    def channel_keys(self) -> list[tuple[int, int]]:
        return sorted(self.per_channel_trace)

    def to_dict(self) -> dict:
        return {
            "mode": self.precision_mode.value,
            "n_v": self.n_v,
            "scale": self.second_order_scale_applied,
            "global_trace": self.global_trace_estimate,
            "residue_trace": self.residue_trace,
            "channels": [
                {"layer": k[0], "channel": k[1], "trace": self.per_channel_trace[k]} for k in self.channel_keys()
            ],
            "iterations": list(self.per_iteration_values),
            "wall_time_s": self.instrumentation.get("wall_time", 0.0),
            "peak_bytes": self.instrumentation.get("peak_bytes", {}),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> TraceReport:
        channels = {(int(c["layer"]), int(c["channel"])): float(c["trace"]) for c in d["channels"]}
        return cls(
            n_v=int(d["n_v"]),
            global_trace_estimate=float(d["global_trace"]),
            per_channel_trace=channels,
            per_iteration_values=[float(x) for x in d["iterations"]],
            precision_mode=PrecisionMode(d["mode"]),
            second_order_scale_applied=float(d["scale"]),
            residue_trace=float(d.get("residue_trace", 0.0)),
            instrumentation={"wall_time": d.get("wall_time_s", 0.0), "peak_bytes": d.get("peak_bytes", {})},
        )


def _group_labels(n: int, groups) -> np.ndarray:
    labels = np.full(n, len(groups), dtype=np.int64)
    for gi, g in enumerate(groups):
        labels[g.weight_indices if isinstance(g, ChannelGroup) else np.asarray(g)] = gi
    return labels


def _run_block(build_loss, arrays, mode, probes, labels, n_bins, scales):
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(params)
    first = GradScaler(ScaleMode.FIRST_ORDER, scales.get("first"))
    second = GradScaler(ScaleMode.SECOND_ORDER, scales.get("second"))
    try:
        grads = first_order_grads(loss, params, mode, first)
    except NonFiniteGradient as exc:
        raise NonFiniteHvp(f"first-order pass: {exc}", iteration=None) from exc
    rows = np.empty((len(probes), n_bins))
    for i, (it, v) in enumerate(probes):
        try:
            hv = hvp(loss, params, v, mode, second, grads=grads)
        except NonFiniteHvp as exc:
            raise NonFiniteHvp(f"iteration {it}: {exc}", iteration=it) from exc
        rows[i] = np.bincount(labels, weights=v * hv, minlength=n_bins)
    tape.free()
    return rows, peak_bytes(tape)


def estimate_trace_of(
    build_loss,
    arrays,
    n_v: int,
    mode: PrecisionMode | str = PrecisionMode.FP32,
    rng_seed: int = 0,
    groups=None,
    scales: dict | None = None,
    workers: int | None = None,
) -> TraceReport:
    """Hutchinson estimate for any scalar loss.

    ``build_loss(params)`` must build the loss from a list of parameter
    Tensors shaped like ``arrays``. ``groups`` are ChannelGroups (or flat
    index arrays) whose partial traces are reported per key.
    """
    if n_v < 1:
        raise ValueError("n_v must be >= 1")
    mode = PrecisionMode.parse(mode)
    scales = dict(scales or {})
    groups = list(groups or [])
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    n = sum(a.size for a in arrays)
    labels = _group_labels(n, groups)
    n_bins = len(groups) + 1
    rng = np.random.default_rng(rng_seed)
    probes = [(i, rademacher(n, rng)) for i in range(n_v)]
    if workers is None:
        workers = int(os.environ.get("HESSKIT_THREADS", "1") or 1)
    workers = max(1, min(workers, n_v))
    start = time.perf_counter()
    if workers == 1:
        rows, peak = _run_block(build_loss, arrays, mode, probes, labels, n_bins, scales)
    else:
        blocks = [probes[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda blk: _run_block(build_loss, arrays, mode, blk, labels, n_bins, scales), blocks))
        rows = np.empty((n_v, n_bins))
        for blk, (r, _) in zip(blocks, results):
            rows[[it for it, _ in blk]] = r
        peak = max((p for _, p in results), key=lambda p: p["total"])
    wall = time.perf_counter() - start
    per_iter = rows.sum(axis=1)
    # shifted mean: exact when every iteration agrees (zero-variance case)
    means = rows[0] + (rows - rows[0]).sum(axis=0) / n_v
    scale = 1.0 if mode is PrecisionMode.FP32 else float(scales.get("second", 2.0**8))
    keys = [g.key if isinstance(g, ChannelGroup) else (0, i) for i, g in enumerate(groups)]
    return TraceReport(
        n_v=n_v,
        # correctly rounded sum, so channels + residue reproduce it exactly
        global_trace_estimate=float(math.fsum(means)),
        per_channel_trace={k: float(means[i]) for i, k in enumerate(keys)},
        per_iteration_values=[float(x) for x in per_iter],
        precision_mode=mode,
        second_order_scale_applied=scale,
        residue_trace=float(means[-1]),
        instrumentation={"wall_time": wall, "peak_bytes": peak},
        per_channel_iterations=rows[:, :-1],
    )


def estimate_trace(
    model: Model,
    batch: HessianBatch,
    n_v: int,
    mode: PrecisionMode | str = PrecisionMode.FP32,
    rng_seed: int = 0,
    scales: dict | None = None,
    workers: int | None = None,
) -> TraceReport:
    """Hutchinson estimate of the total and per-channel Hessian traces of a model.

    One Rademacher probe over all parameters per iteration; each channel's
    trace is the partial sum of ``v * Hv`` over its weight indices, so the
    channel traces plus the residue add up to the global estimate. The model
    runs in evaluation mode on the fixed batch. ``scales`` may override
    ``{"first": 2**16, "second": 2**8}``.
    """
    mode = PrecisionMode.parse(mode)
    names = model.param_names()

    def build_loss(params):
        return model_loss(model, batch, dict(zip(names, params)), mode)

    return estimate_trace_of(build_loss, [model.params[k] for k in names], n_v, mode, rng_seed,
                             groups=channel_groups(model), scales=scales, workers=workers)


@dataclass
class ModeComparison:
    fp32: TraceReport
    fp16: TraceReport
    kendall_tau: float
    peak_byte_ratio: float
    wall_time_ratio: float
    scale_ratio_max_rel_error: float
    low_confidence: bool

    def to_dict(self) -> dict:
        return {
            "kendall_tau": self.kendall_tau,
            "peak_byte_ratio": self.peak_byte_ratio,
            "fp32_peak_bytes": self.fp32.instrumentation["peak_bytes"]["total"],
            "fp16_peak_bytes": self.fp16.instrumentation["peak_bytes"]["total"],
            "wall_time_ratio": self.wall_time_ratio,
            "wall_time_note": "emulated FP16 on CPU; not comparable to GPU timings",
            "scale_ratio_max_rel_error": self.scale_ratio_max_rel_error,
            "n_v": self.fp32.n_v,
            "low_confidence": self.low_confidence,
        }


def kendall_tau(a, b) -> float:
    tau = stats.kendalltau(np.asarray(a), np.asarray(b)).statistic
    return float(tau) if np.isfinite(tau) else float("nan")


def compare_modes(model: Model, batch: HessianBatch, n_v: int, seed: int, prunable_only: bool = True) -> ModeComparison:
    """Run both precision modes on identical probes and compare channel rankings."""
    r32 = estimate_trace(model, batch, n_v, PrecisionMode.FP32, seed)
    r16 = estimate_trace(model, batch, n_v, PrecisionMode.FP16_SCALED, seed)
    keys = [g.key for g in channel_groups(model) if g.prunable or not prunable_only]
    t32 = np.array([r32.per_channel_trace[k] for k in keys])
    t16 = np.array([r16.per_channel_trace[k] for k in keys])
    scale = r16.second_order_scale_applied
    denom = np.maximum(np.abs(scale * t32), 1e-300)
    rel = np.abs(t16 - scale * t32) / denom
    wall32 = r32.instrumentation["wall_time"]
    return ModeComparison(
        fp32=r32,
        fp16=r16,
        kendall_tau=kendall_tau(t32, t16),
        peak_byte_ratio=r16.instrumentation["peak_bytes"]["total"] / r32.instrumentation["peak_bytes"]["total"],
        wall_time_ratio=r16.instrumentation["wall_time"] / wall32 if wall32 > 0 else float("nan"),
        scale_ratio_max_rel_error=float(rel.max()) if rel.size else 0.0,
        low_confidence=n_v < 30,
    )
