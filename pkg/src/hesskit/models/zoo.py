"""Small architectures with explicit per-channel parameter bookkeeping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from ..autodiff import Tensor, batch_norm, conv2d, global_avg_pool, linear, relu, round_fp32
from ..autodiff.functional import flatten
from ..errors import InvalidSpec

ARCHITECTURES = ("MLP", "SmallConvNet", "MiniResNet")
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` means: for MLP the full layer-size list ``[in, hidden..., out]``;
    for SmallConvNet the conv channel counts; for MiniResNet
    ``[stem, inner_1, ..., inner_B]`` where each inner width is the hidden
    width of one residual block.
    """

    architecture: str
    widths: tuple
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise InvalidSpec(f"unknown architecture {self.architecture!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise InvalidSpec(f"all widths must be >= 1, got {self.widths}")
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.architecture == "MLP":
            if len(self.widths) < 2:
                raise InvalidSpec("MLP needs at least input and output widths")
            if self.widths[-1] != self.num_classes:
                raise InvalidSpec("MLP output width must equal num_classes")
            if int(np.prod(self.input_shape)) != self.widths[0]:
                raise InvalidSpec("MLP input width must match input_shape")
        else:
            if len(self.input_shape) != 3:
                raise InvalidSpec("conv architectures need input_shape (C, H, W)")
            if self.architecture == "MiniResNet" and len(self.widths) < 2:
                raise InvalidSpec("MiniResNet needs a stem width and at least one block")

    @classmethod
    def mlp(cls, widths) -> ModelSpec:
        return cls("MLP", tuple(widths), widths[-1], (widths[0],))

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        try:
            return cls(d["architecture"], tuple(d["widths"]), int(d["num_classes"]), tuple(d["input_shape"]))
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"malformed model spec: {exc}") from None


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # "dense" or "conv"
    cin: int
    cout: int
    bias: bool
    bn: bool
    relu: bool
    prunable: bool
    consumer: str | None
    k: int = 1

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.cout, self.cin)
        return (self.cout, self.cin, self.k, self.k)

    @property
    def fan_in(self) -> int:
        return self.cin * self.k * self.k


def layer_plan(spec: ModelSpec) -> list[Layer]:
    w = spec.widths
    plan: list[Layer] = []
    if spec.architecture == "MLP":
        n = len(w) - 1
        for i in range(n):
            last = i == n - 1
            plan.append(Layer(f"dense{i}", "dense", w[i], w[i + 1], True, False, not last, not last,
                              None if last else f"dense{i + 1}"))
        return plan
    cin = spec.input_shape[0]
    if spec.architecture == "SmallConvNet":
        for i, c in enumerate(w):
            consumer = f"conv{i + 1}" if i + 1 < len(w) else "fc"
            plan.append(Layer(f"conv{i}", "conv", cin, c, False, True, True, True, consumer, 3))
            cin = c
        plan.append(Layer("fc", "dense", cin, spec.num_classes, True, False, False, False, None))
        return plan
    stem, inner = w[0], w[1:]
    plan.append(Layer("stem", "conv", cin, stem, False, True, True, False, "block0a", 3))
    for b, c in enumerate(inner):
        nxt = f"block{b + 1}a" if b + 1 < len(inner) else "fc"
        plan.append(Layer(f"block{b}a", "conv", stem, c, False, True, True, True, f"block{b}b", 3))
        # output feeds the residual sum, so its channels are tied to the skip path
        plan.append(Layer(f"block{b}b", "conv", c, stem, False, True, False, False, nxt, 3))
    plan.append(Layer("fc", "dense", stem, spec.num_classes, True, False, False, False, None))
    return plan


def _param_names(layer: Layer) -> list[str]:
    names = [f"{layer.name}.weight"]
    if layer.bias:
        names.append(f"{layer.name}.bias")
    if layer.bn:
        names += [f"{layer.name}.bn_gamma", f"{layer.name}.bn_beta"]
    return names


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def plan(self) -> list[Layer]:
        return layer_plan(self.spec)

    def param_names(self) -> list[str]:
        return [n for layer in self.plan for n in _param_names(layer)]

    def num_params(self) -> int:
        return sum(self.params[n].size for n in self.param_names())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def offsets(self) -> dict[str, int]:
        out, pos = {}, 0
        for n in self.param_names():
            out[n] = pos
            pos += self.params[n].size
        return out

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for n in self.param_names():
            p = self.params[n]
            self.params[n] = np.asarray(vec[pos:pos + p.size], dtype=np.float64).reshape(p.shape).copy()
            pos += p.size

    def copy(self) -> Model:
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()})

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {n: Tensor(self.params[n], requires_grad=requires_grad, name=n) for n in self.param_names()}

    def forward(self, x, params: dict | None = None, training: bool = False, weight_hook=None, act_hook=None) -> Tensor:
        """Logits for a batch ``x``.

        ``params`` maps names to Tensors (defaults to constant wrappers).
        ``weight_hook(name, t)`` and ``act_hook(name, t)`` may replace each
        weight and each post-activation tensor; quantizer blocks use them.
        """
        if params is None:
            params = self.tensors(requires_grad=False)
        x = x if isinstance(x, Tensor) else Tensor(x)
        if weight_hook is None:
            weight_hook = _identity
        if act_hook is None:
            act_hook = _identity

        def run(layer: Layer, h: Tensor, apply_relu: bool | None = None) -> Tensor:
            wt = weight_hook(f"{layer.name}.weight", params[f"{layer.name}.weight"])
            b = params.get(f"{layer.name}.bias")
            if layer.kind == "dense":
                h = linear(h, wt, b)
            else:
                h = conv2d(h, wt, b, stride=1, padding=layer.k // 2)
            if layer.bn:
                h = batch_norm(h, params[f"{layer.name}.bn_gamma"], params[f"{layer.name}.bn_beta"],
                               self.buffers[f"{layer.name}.bn_mean"], self.buffers[f"{layer.name}.bn_var"],
                               training=training, momentum=BN_MOMENTUM)
            if layer.relu if apply_relu is None else apply_relu:
                h = act_hook(layer.name, relu(h))
            return h

        plan = self.plan
        arch = self.spec.architecture
        if arch == "MLP":
            h = flatten(x) if x.ndim > 2 else x
            for layer in plan:
                h = run(layer, h)
            return h
        if arch == "SmallConvNet":
            h = x
            for layer in plan[:-1]:
                h = run(layer, h)
            return run(plan[-1], global_avg_pool(h))
        by_name = {layer.name: layer for layer in plan}
        h = run(by_name["stem"], x)
        for b in range(len(self.spec.widths) - 1):
            t = run(by_name[f"block{b}a"], h)
            t = run(by_name[f"block{b}b"], t)
            h = act_hook(f"block{b}", relu(h + t))
        return run(by_name["fc"], global_avg_pool(h))

    def round_params(self) -> None:
        """Snap parameters and buffers to FP32-representable values."""
        for n in self.params:
            self.params[n] = round_fp32(self.params[n])
        for n in self.buffers:
            self.buffers[n] = round_fp32(self.buffers[n])


def _identity(name, t):
    return t


def build_model(spec: ModelSpec, rng_seed: int) -> Model:
    """He-uniform weights, zero biases, unit/zero batch-norm affine."""
    if not isinstance(spec, ModelSpec):
        raise InvalidSpec("build_model expects a ModelSpec")
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    model = Model(spec)
    for layer in layer_plan(spec):
        bound = np.sqrt(6.0 / layer.fan_in)
        model.params[f"{layer.name}.weight"] = rng.uniform(-bound, bound, size=layer.weight_shape)
        if layer.bias:
            model.params[f"{layer.name}.bias"] = np.zeros(layer.cout)
        if layer.bn:
            model.params[f"{layer.name}.bn_gamma"] = np.ones(layer.cout)
            model.params[f"{layer.name}.bn_beta"] = np.zeros(layer.cout)
            model.buffers[f"{layer.name}.bn_mean"] = np.zeros(layer.cout)
            model.buffers[f"{layer.name}.bn_var"] = np.ones(layer.cout)
    model.round_params()
    return model


def predict(model: Model, x: np.ndarray, batch_size: int = 512, **forward_kw) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.forward(x[i:i + batch_size], **forward_kw).data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, **forward_kw) -> float:
    if len(x) == 0:
        return 0.0
    logits = predict(model, x, **forward_kw)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))
