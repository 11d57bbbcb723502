"""Hessian-aware structured channel pruning.

Sensitivity of a channel is ``Trace(H_pp) / (2p) * ||w_p||^2`` where the
trace comes from the Hutchinson estimator. Selection greedily removes the
least sensitive channels until the retained parameter fraction reaches the
target; the model is then rebuilt with narrower layers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, precision, Precision, softmax_cross_entropy
from .errors import ChannelSetMismatch, InfeasibleTarget, SingularBlock, StructuralViolation, TooLarge
from .hutchinson import HessianBatch, TraceReport, first_order_grads, hvp, PrecisionMode
from .models.groups import ChannelGroup, channel_groups
from .models.training import Dataset, History, TrainConfig, train
from .models.zoo import Model, ModelSpec, layer_plan
from .report import canonical_json

log = logging.getLogger(__name__)

MAX_EXACT_PARAMS = 2000
SINGULAR_TOL = 1e-10


@dataclass
class SensitivityRecord:
    group: ChannelGroup
    trace_estimate: float
    weight_norm_sq: float
    sensitivity: float
    clamped: bool = False

    @property
    def key(self) -> tuple[int, int]:
        return self.group.key

    def to_dict(self) -> dict:
        return {
            "layer": self.group.layer_id,
            "layer_name": self.group.layer_name,
            "channel": self.group.channel_index,
            "p": self.group.p,
            "trace": self.trace_estimate,
            "weight_norm_sq": self.weight_norm_sq,
            "sensitivity": self.sensitivity,
            "clamped": self.clamped,
        }


def sensitivity(trace: float, p: int, weight_norm_sq: float) -> float:
    return trace / (2.0 * p) * weight_norm_sq


def channel_sensitivity(report: TraceReport, model: Model) -> list[SensitivityRecord]:
    """One record per prunable channel group, ordered (layer, channel).

    Negative trace estimates are clamped to zero; ``clamped`` marks them.
    """
    groups = channel_groups(model)
    if set(report.per_channel_trace) != {g.key for g in groups}:
        raise ChannelSetMismatch("trace report channels do not match the model's channel groups")
    flat = model.flat()
    records = []
    for g in groups:
        if not g.prunable:
            continue
        raw = float(report.per_channel_trace[g.key])
        trace = max(raw, 0.0)
        norm_sq = float(np.sum(flat[g.weight_indices] ** 2))
        records.append(SensitivityRecord(g, raw, norm_sq, sensitivity(trace, g.p, norm_sq), raw < 0))
    clamped = sum(r.clamped for r in records)
    if clamped:
        log.info("clamped %d negative channel trace estimates to 0", clamped)
    return records


@dataclass
class PrunePlan:
    removals: list
    original_params: int
    predicted_retained_params: int
    achieved_compression_ratio: float
    per_layer_prune_fraction: dict
    target_compression: float
    prune_ratio_limit: float
    clamp_count: int = 0

    def removed_by_layer(self) -> dict[int, set]:
        out: dict[int, set] = {}
        for lid, ch in self.removals:
            out.setdefault(lid, set()).add(ch)
        return out

    def to_dict(self) -> dict:
        return {
            "removals": [[int(lid), int(ch)] for lid, ch in self.removals],
            "original_params": self.original_params,
            "predicted_retained_params": self.predicted_retained_params,
            "achieved_compression_ratio": self.achieved_compression_ratio,
            "per_layer_prune_fraction": {str(k): v for k, v in sorted(self.per_layer_prune_fraction.items())},
            "target_compression": self.target_compression,
            "prune_ratio_limit": self.prune_ratio_limit,
            "clamp_count": self.clamp_count,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> PrunePlan:
        return cls(
            removals=[(int(a), int(b)) for a, b in d["removals"]],
            original_params=int(d["original_params"]),
            predicted_retained_params=int(d["predicted_retained_params"]),
            achieved_compression_ratio=float(d["achieved_compression_ratio"]),
            per_layer_prune_fraction={int(k): float(v) for k, v in d["per_layer_prune_fraction"].items()},
            target_compression=float(d["target_compression"]),
            prune_ratio_limit=float(d["prune_ratio_limit"]),
            clamp_count=int(d.get("clamp_count", 0)),
        )


def select_channels(
    records: list[SensitivityRecord],
    target_compression: float,
    prune_ratio_limit: float = 0.95,
    *,
    total_params: int,
) -> PrunePlan:
    """Greedy lowest-sensitivity-first selection.

    Removes channels (ties broken by ascending layer, then channel) until
    retained/original <= target. A removal is skipped if it would push its
    layer past ``prune_ratio_limit`` or leave the layer empty. Removing a
    channel deletes its own and its coupled parameters; the retained count is
    exact because overlapping coupled sets are counted once.
    """
    if not records:
        raise ValueError("no sensitivity records")
    if not 0 < target_compression < 1:
        raise ValueError(f"target_compression must be in (0, 1), got {target_compression}")
    if not 0 < prune_ratio_limit <= 1:
        raise ValueError(f"prune_ratio_limit must be in (0, 1], got {prune_ratio_limit}")
    width: dict[int, int] = {}
    for r in records:
        width[r.group.layer_id] = width.get(r.group.layer_id, 0) + 1
    max_pruned = {lid: min(int(np.floor(prune_ratio_limit * n + 1e-9)), n - 1) for lid, n in width.items()}
    pruned = {lid: 0 for lid in width}
    removed = np.zeros(total_params, dtype=bool)
    retained = total_params
    removals = []
    order = sorted(records, key=lambda r: (r.sensitivity, r.group.layer_id, r.group.channel_index))
    for r in order:
        if retained / total_params <= target_compression:
            break
        lid = r.group.layer_id
        if pruned[lid] >= max_pruned[lid]:
            continue
        idx = np.concatenate([r.group.own_param_indices, r.group.coupled_param_indices])
        fresh = idx[~removed[idx]]
        removed[fresh] = True
        retained -= int(np.unique(fresh).size)
        pruned[lid] += 1
        removals.append(r.group.key)
    ratio = retained / total_params
    if ratio > target_compression + 0.05:
        raise InfeasibleTarget(
            f"best reachable retained ratio {ratio:.4f} is more than 5 points above target {target_compression}")
    return PrunePlan(
        removals=removals,
        original_params=int(total_params),
        predicted_retained_params=int(retained),
        achieved_compression_ratio=ratio,
        per_layer_prune_fraction={lid: pruned[lid] / width[lid] for lid in sorted(width)},
        target_compression=float(target_compression),
        prune_ratio_limit=float(prune_ratio_limit),
        clamp_count=sum(r.clamped for r in records),
    )


def plan_from_removals(model: Model, removals, target_compression: float = 0.5,
                       prune_ratio_limit: float = 1.0) -> PrunePlan:
    """A plan for an explicit list of (layer_id, channel) removals, with exact accounting."""
    groups = {g.key: g for g in channel_groups(model)}
    total = model.num_params()
    removed = np.zeros(total, dtype=bool)
    width: dict[int, int] = {}
    for g in groups.values():
        width[g.layer_id] = width.get(g.layer_id, 0) + 1
    pruned = {lid: 0 for lid in width}
    removals = [tuple(int(v) for v in r) for r in removals]
    for key in removals:
        if key not in groups:
            raise StructuralViolation(f"no channel group {key}")
        g = groups[key]
        removed[g.own_param_indices] = True
        removed[g.coupled_param_indices] = True
        pruned[g.layer_id] += 1
    retained = int(total - removed.sum())
    return PrunePlan(
        removals=removals,
        original_params=total,
        predicted_retained_params=retained,
        achieved_compression_ratio=retained / total,
        per_layer_prune_fraction={lid: pruned[lid] / width[lid] for lid in sorted(width)},
        target_compression=float(target_compression),
        prune_ratio_limit=float(prune_ratio_limit),
    )


def _kept_channels(model: Model, plan: PrunePlan) -> dict[str, np.ndarray]:
    layers = model.plan
    removed = plan.removed_by_layer()
    kept = {}
    for lid, layer in enumerate(layers):
        drop = removed.pop(lid, set())
        if drop and not layer.prunable:
            raise StructuralViolation(f"layer {layer.name} is not prunable")
        if any(c < 0 or c >= layer.cout for c in drop):
            raise StructuralViolation(f"channel index out of range for layer {layer.name}")
        keep = np.array([c for c in range(layer.cout) if c not in drop], dtype=np.int64)
        if keep.size == 0:
            raise StructuralViolation(f"plan removes every channel of layer {layer.name}")
        kept[layer.name] = keep
    if removed:
        raise StructuralViolation(f"plan names unknown layers {sorted(removed)}")
    return kept


def _pruned_spec(spec: ModelSpec, kept: dict[str, np.ndarray]) -> ModelSpec:
    layers = layer_plan(spec)
    arch = spec.architecture
    if arch == "MLP":
        widths = [spec.widths[0]] + [kept[layer.name].size for layer in layers]
    elif arch == "SmallConvNet":
        widths = [kept[layer.name].size for layer in layers if layer.kind == "conv"]
    else:
        widths = [kept["stem"].size] + [kept[f"block{b}a"].size for b in range(len(spec.widths) - 1)]
    return ModelSpec(arch, tuple(widths), spec.num_classes, spec.input_shape)


def apply_prune(model: Model, plan: PrunePlan) -> Model:
    """Structurally remove the planned channels; surviving values are copied unchanged."""
    if plan.original_params != model.num_params():
        raise StructuralViolation(
            f"plan was made for a model with {plan.original_params} params, got {model.num_params()}")
    kept = _kept_channels(model, plan)
    layers = model.plan
    producer = {layer.consumer: layer.name for layer in layers if layer.consumer}
    new = Model(_pruned_spec(model.spec, kept))
    for layer in layers:
        out = kept[layer.name]
        w = model.params[f"{layer.name}.weight"][out]
        if layer.name in producer:
            w = w[:, kept[producer[layer.name]]]
        new.params[f"{layer.name}.weight"] = w.copy()
        for suffix in ("bias", "bn_gamma", "bn_beta"):
            k = f"{layer.name}.{suffix}"
            if k in model.params:
                new.params[k] = model.params[k][out].copy()
        for suffix in ("bn_mean", "bn_var"):
            k = f"{layer.name}.{suffix}"
            if k in model.buffers:
                new.buffers[k] = model.buffers[k][out].copy()
    if new.num_params() != plan.predicted_retained_params:
        raise StructuralViolation(
            f"rebuilt model has {new.num_params()} params, plan predicted {plan.predicted_retained_params}")
    return new


def mask_prune(model: Model, plan: PrunePlan) -> Model:
    """Copy of ``model`` with the planned channels' own and coupled parameters zeroed."""
    _kept_channels(model, plan)
    groups = {g.key: g for g in channel_groups(model)}
    flat = model.flat()
    for key in plan.removals:
        g = groups[key]
        flat[g.own_param_indices] = 0.0
        flat[g.coupled_param_indices] = 0.0
    out = model.copy()
    out.set_flat(flat)
    return out


def fine_tune(model: Model, dataset: Dataset, config: TrainConfig, rng_seed: int = 0) -> tuple[Model, History]:
    """SGD fine-tuning of a pruned model (same loop as training)."""
    return train(model, dataset, config, rng_seed)


def hessian_of(build_loss, arrays) -> tuple[np.ndarray, float]:
    """Dense Hessian by unit-vector HVPs, symmetrized; returns (H, max asymmetry)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    n = sum(a.size for a in arrays)
    if n > MAX_EXACT_PARAMS:
        raise TooLarge(f"{n} parameters exceeds the exact-Hessian limit of {MAX_EXACT_PARAMS}")
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with precision(Precision.FP32):
        with Tape() as tape:
            loss = build_loss(params)
        grads = first_order_grads(loss, params, PrecisionMode.FP32)
        H = np.empty((n, n))
        e = np.zeros(n)
        for i in range(n):
            e[i] = 1.0
            H[:, i] = hvp(loss, params, e, PrecisionMode.FP32, grads=grads)
            e[i] = 0.0
    tape.free()
    asym = float(np.max(np.abs(H - H.T))) if n else 0.0
    return 0.5 * (H + H.T), asym


def exact_hessian(model: Model, batch: HessianBatch, weight_decay: float = 0.0) -> tuple[np.ndarray, float]:
    """Full FP32 Hessian of the evaluation-mode loss (plus optional L2 term).

    Indices follow ``model.flat()``. Returns the symmetrized matrix and the
    largest entrywise asymmetry seen before symmetrizing.
    """
    names = model.param_names()

    def build_loss(params):
        logits = model.forward(batch.inputs, params=dict(zip(names, params)), training=False)
        loss = softmax_cross_entropy(logits, batch.labels)
        if weight_decay:
            reg = None
            for p in params:
                term = (p * p).sum()
                reg = term if reg is None else reg + term
            loss = loss + reg * (0.5 * weight_decay)
        return loss

    return hessian_of(build_loss, [model.params[k] for k in names])


def lagrangian_change(H: np.ndarray, w: np.ndarray, prune_index) -> tuple[float, np.ndarray]:
    """Second-order loss change of zeroing ``w[p]`` with the optimal compensating update.

    Returns ``(0.5 w_p^T (H_pp - H_pl H_ll^-1 H_lp) w_p, dw_l)`` with
    ``dw_l = H_ll^-1 H_lp w_p`` ordered like the surviving indices.
    """
    H = np.asarray(H, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    if H.shape != (n, n):
        raise ValueError(f"H has shape {H.shape}, expected ({n}, {n})")
    p = np.unique(np.asarray(prune_index, dtype=np.int64))
    if p.size == 0 or p.min() < 0 or p.max() >= n:
        raise ValueError("prune index set must be non-empty and within range")
    mask = np.ones(n, dtype=bool)
    mask[p] = False
    l_idx = np.flatnonzero(mask)
    wp = w[p]
    Hpp = H[np.ix_(p, p)]
    if l_idx.size == 0:
        return float(0.5 * wp @ Hpp @ wp), np.zeros(0)
    Hll = H[np.ix_(l_idx, l_idx)]
    Hlp = H[np.ix_(l_idx, p)]
    eig = np.linalg.eigvalsh(0.5 * (Hll + Hll.T))
    if np.min(np.abs(eig)) <= SINGULAR_TOL * max(1.0, float(np.max(np.abs(eig)))):
        raise SingularBlock("H_ll is not invertible; the Hessian is not positive definite on the kept block")
    rhs = Hlp @ wp
    dwl = np.linalg.solve(Hll, rhs)
    delta = 0.5 * (wp @ Hpp @ wp - rhs @ dwl)
    return float(delta), dwl
