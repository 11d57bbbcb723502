"""Channel groups (flat parameter index sets) and size/FLOP accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .zoo import Layer, Model


@dataclass(frozen=True)
class ChannelGroup:
    """Parameters owned by one output channel and the consumer weights that read it.

    ``weight_indices`` is the subset of ``own_param_indices`` holding the
    producing filter/neuron weights; its length is ``p``. Bias and
    batch-norm affine entries are owned (removed with the channel) but are
    not part of ``p``.
    """

    layer_id: int
    layer_name: str
    channel_index: int
    own_param_indices: np.ndarray
    weight_indices: np.ndarray
    coupled_param_indices: np.ndarray
    prunable: bool

    @property
    def p(self) -> int:
        return int(self.weight_indices.size)

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer_id, self.channel_index)


def _out_channel_indices(layer: Layer, base: int, c: int) -> np.ndarray:
    per = int(np.prod(layer.weight_shape[1:]))
    return base + c * per + np.arange(per)


def _in_channel_indices(layer: Layer, base: int, c: int) -> np.ndarray:
    shape = layer.weight_shape
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    return base + idx[:, c].ravel()


def channel_groups(model: Model) -> list[ChannelGroup]:
    """One group per output channel of every non-classifier layer, ordered (layer, channel)."""
    plan = model.plan
    offsets = model.offsets()
    by_name = {layer.name: layer for layer in plan}
    groups = []
    for lid, layer in enumerate(plan):
        if layer.consumer is None:
            continue
        consumer = by_name[layer.consumer]
        wbase = offsets[f"{layer.name}.weight"]
        cbase = offsets[f"{consumer.name}.weight"]
        for c in range(layer.cout):
            w_idx = _out_channel_indices(layer, wbase, c)
            own = [w_idx]
            for suffix in ("bias", "bn_gamma", "bn_beta"):
                key = f"{layer.name}.{suffix}"
                if key in offsets:
                    own.append(np.array([offsets[key] + c]))
            coupled = _in_channel_indices(consumer, cbase, c)
            groups.append(ChannelGroup(lid, layer.name, c, np.concatenate(own), w_idx, coupled, layer.prunable))
    return groups


def layer_widths(model: Model) -> dict[str, int]:
    return {layer.name: layer.cout for layer in model.plan}


def count_params_flops(model: Model) -> tuple[int, int]:
    """Total scalar parameters and FLOPs for one forward sample.

    Dense m->n costs 2mn, a k x k conv costs 2 k^2 C_in C_out H_out W_out, and
    each elementwise stage (bias, batch-norm, ReLU, residual add) one FLOP per
    output value. Global average pooling costs one FLOP per input value.
    """
    spec = model.spec
    params = model.num_params()
    flops = 0
    hw = 1 if spec.architecture == "MLP" else spec.input_shape[1] * spec.input_shape[2]
    for layer in model.plan:
        if layer.kind == "dense":
            flops += 2 * layer.cin * layer.cout
            out_vals = layer.cout
        else:
            flops += 2 * layer.k * layer.k * layer.cin * layer.cout * hw
            out_vals = layer.cout * hw
        flops += out_vals * (int(layer.bias) + int(layer.bn) + int(layer.relu))
        if layer.name.endswith("b") and layer.name.startswith("block"):
            flops += 2 * out_vals  # residual add + ReLU
        if layer.consumer == "fc":
            flops += out_vals
    return int(params), int(flops)
