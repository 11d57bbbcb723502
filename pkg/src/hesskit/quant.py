"""Uniform INT8 quantization: calibration, fake-quant with STE, QAT and export.

Weights use symmetric per-tensor quantization on [-127, 127] with Z = 0.
Post-activation tensors use asymmetric quantization on [0, 255] with an EMA
range observer. Quantize is ``Int(r/S) - Z`` and dequantize ``S (q + Z)``,
with Int rounding half to even.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Primitive, Tensor, apply, register
from .autodiff.tensor import _exact_constant
from .errors import CorruptQuantFile, InvalidSpec
from .models.training import Dataset, History, TrainConfig, sgd_epochs
from .models.zoo import Model, ModelSpec, predict

S_FLOOR = 2.0**-16
ACT_MOMENTUM = 0.99


@dataclass(frozen=True)
class QuantParams:
    S: float
    Z: int
    alpha: float
    beta: float
    signed: bool
    q_min: int
    q_max: int

    def __post_init__(self):
        if not self.S > 0:
            raise ValueError(f"scale must be positive, got {self.S}")
        if self.alpha > self.beta:
            raise ValueError("alpha must not exceed beta")

    @classmethod
    def symmetric(cls, beta: float) -> QuantParams:
        beta = abs(float(beta))
        S = max(beta / 127.0, S_FLOOR)
        return cls(S, 0, -beta, beta, True, -127, 127)

    @classmethod
    def asymmetric(cls, alpha: float, beta: float) -> QuantParams:
        """Unsigned [0, 255] range; the clip range is widened to contain 0 so zero stays exact."""
        alpha, beta = min(float(alpha), 0.0), max(float(beta), 0.0)
        S = max((beta - alpha) / 255.0, S_FLOOR)
        return cls(S, int(np.round(alpha / S)), alpha, beta, False, 0, 255)


def calibrate_symmetric(values) -> QuantParams:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    return QuantParams.symmetric(max(abs(float(values.max())), abs(float(values.min()))))


@dataclass
class RangeObserver:
    running_min: float = 0.0
    running_max: float = 0.0
    momentum: float = ACT_MOMENTUM
    initialized: bool = False
    frozen: bool = False

    def params(self) -> QuantParams:
        if not self.initialized:
            raise ValueError("observer has seen no data")
        return QuantParams.asymmetric(self.running_min, self.running_max)


@dataclass
class FrozenRange:
    """Activation quantizer restored from a file; only (S, Z) are stored."""

    qparams: QuantParams
    frozen: bool = True

    def params(self) -> QuantParams:
        return self.qparams


def observe(observer: RangeObserver, batch_min: float, batch_max: float) -> RangeObserver:
    """EMA update in place (returns the observer); the first call initializes."""
    if batch_min > batch_max:
        raise ValueError("batch_min exceeds batch_max")
    if observer.frozen:
        return observer
    if not observer.initialized:
        observer.running_min, observer.running_max = float(batch_min), float(batch_max)
        observer.initialized = True
        return observer
    m = observer.momentum
    observer.running_min = m * observer.running_min + (1 - m) * float(batch_min)
    observer.running_max = m * observer.running_max + (1 - m) * float(batch_max)
    return observer


def quantize(r, params: QuantParams):
    q = np.clip(np.round(np.asarray(r, dtype=np.float64) / params.S) - params.Z, params.q_min, params.q_max)
    q = q.astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(q, params: QuantParams):
    out = params.S * (np.asarray(q, dtype=np.float64) + params.Z)
    return float(out) if out.ndim == 0 else out


@register
class FakeQuant(Primitive):
    name = "fake_quant"

    def forward(self, x, S, Z, q_min, q_max, alpha, beta):
        q = np.clip(np.round(x / S) - Z, q_min, q_max)
        return S * (q + Z)

    def backward(self, node, g):
        x = node.inputs[0].data
        inside = (x >= node.attrs["alpha"]) & (x <= node.attrs["beta"])
        return (apply("mul", g, _exact_constant(inside.astype(np.float64))),)


def fake_quant(x: Tensor, params: QuantParams) -> Tensor:
    """Quantize-dequantize with a straight-through gradient inside [alpha, beta]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return apply("fake_quant", x, S=params.S, Z=params.Z, q_min=params.q_min, q_max=params.q_max,
                 alpha=params.alpha, beta=params.beta)


@dataclass
class QATModel:
    """A model with quantizer blocks on every weight and post-activation tensor."""

    model: Model
    observers: dict = field(default_factory=dict)
    weight_params: dict = field(default_factory=dict)
    frozen: bool = False
    history: History | None = None

    def _weight_hook(self, name, w):
        params = self.weight_params[name] if self.frozen else calibrate_symmetric(w.data)
        return fake_quant(w, params)

    def _act_hook(self, name, t):
        obs = self.observers.setdefault(name, RangeObserver())
        if not self.frozen:
            observe(obs, float(t.data.min()), float(t.data.max()))
        return fake_quant(t, obs.params())

    def forward_kw(self) -> dict:
        return {"weight_hook": self._weight_hook, "act_hook": self._act_hook}

    def freeze(self) -> None:
        self.weight_params = {n: calibrate_symmetric(self.model.params[n])
                              for n in self.model.param_names() if n.endswith(".weight")}
        for obs in self.observers.values():
            obs.frozen = True
        self.frozen = True

    def predict(self, x: np.ndarray) -> np.ndarray:
        if not self.frozen:
            raise ValueError("freeze observers before evaluation")
        return predict(self.model, x, **self.forward_kw())

    def accuracy(self, dataset: Dataset) -> float:
        return float(np.mean(self.predict(dataset.x).argmax(axis=1) == dataset.y))


def calibrate(qat: QATModel, dataset: Dataset, batch_size: int = 128) -> None:
    """One evaluation-mode pass over ``dataset`` to initialize the observers."""
    for start in range(0, len(dataset), batch_size):
        qat.model.forward(dataset.x[start:start + batch_size], **qat.forward_kw())


def qat_train(model: Model, dataset: Dataset, config: TrainConfig, rng_seed: int = 0) -> QATModel:
    """Calibrate observers, fine-tune on the fake-quant graph, then freeze.

    With zero epochs this is post-training quantization.
    """
    qat = QATModel(model.copy())
    calibrate(qat, dataset, config.batch_size)
    qat.history = sgd_epochs(qat.model, dataset, config, rng_seed, forward_kw=qat.forward_kw())
    qat.freeze()
    return qat


# --- INT8 file -------------------------------------------------------------

MAGIC = b"EHAPQNT1"
VERSION = 1
KIND_WEIGHT, KIND_FP32, KIND_ACT = 0, 1, 2
BUFFER_SUFFIXES = (".bn_mean", ".bn_var")


def _record(name: str, kind: int, arr: np.ndarray, S: float, Z: int, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<di", S, Z)
    return head + payload


def export_int8(qat: QATModel) -> bytes:
    """Serialize int8 weights with per-tensor (S, Z), FP32 biases/batch-norm, and activation params.

    Layout: magic, u16 version, u32 spec length and canonical JSON spec, u64
    record count, then per record: u16 name length, name, u8 kind, u8 rank,
    rank x u32 extents, f64 S, i32 Z, payload (int8 or little-endian f32).
    Batch-norm running statistics are FP32 records named ``<layer>.bn_mean``
    and ``<layer>.bn_var``; activation records carry only (S, Z) and an
    empty payload.
    """
    if not qat.frozen:
        raise ValueError("freeze observers before export")
    model = qat.model
    records = []
    for n in model.param_names():
        arr = model.params[n]
        if n in qat.weight_params:
            p = qat.weight_params[n]
            q = quantize(arr, p).astype("<i1")
            records.append(_record(n, KIND_WEIGHT, arr, p.S, p.Z, q.tobytes()))
        else:
            records.append(_record(n, KIND_FP32, arr, 1.0, 0, np.ascontiguousarray(arr, dtype="<f4").tobytes()))
    for n in sorted(model.buffers):
        arr = model.buffers[n]
        records.append(_record(n, KIND_FP32, arr, 1.0, 0,
                               np.ascontiguousarray(arr, dtype="<f4").tobytes()))
    for n in sorted(qat.observers):
        p = qat.observers[n].params()
        records.append(_record(n, KIND_ACT, np.zeros(0), p.S, p.Z, b""))
    spec_blob = model.spec.to_json().encode("utf-8")
    return b"".join([MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(spec_blob)), spec_blob,
                     struct.pack("<Q", len(records))] + records)


def load_int8(data: bytes) -> QATModel:
    data = bytes(data)
    pos = 0

    def take(n):
        nonlocal pos
        if n < 0 or pos + n > len(data):
            raise CorruptQuantFile(f"truncated file at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if take(len(MAGIC)) != MAGIC:
        raise CorruptQuantFile("bad magic")
    (version,) = unpack("<H")
    if version != VERSION:
        raise CorruptQuantFile(f"unsupported version {version}")
    (spec_len,) = unpack("<I")
    try:
        spec = ModelSpec.from_dict(json.loads(take(spec_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, InvalidSpec) as exc:
        raise CorruptQuantFile(f"bad spec blob: {exc}") from None
    (count,) = unpack("<Q")
    model = Model(spec)
    qat = QATModel(model)
    for _ in range(count):
        (name_len,) = unpack("<H")
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptQuantFile("bad record name") from None
        kind, rank = unpack("<BB")
        shape = unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        S, Z = unpack("<di")
        if kind == KIND_WEIGHT:
            if not S > 0 or Z != 0:
                raise CorruptQuantFile(f"bad weight quantization for {name}")
            q = np.frombuffer(take(size), dtype="<i1").astype(np.int64).reshape(shape)
            beta = 127.0 * S
            p = QuantParams(S, 0, -beta, beta, True, -127, 127)
            model.params[name] = dequantize(q, p)
            qat.weight_params[name] = p
        elif kind == KIND_FP32:
            arr = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
            if name.endswith(BUFFER_SUFFIXES):
                model.buffers[name] = arr
            else:
                model.params[name] = arr
        elif kind == KIND_ACT:
            if shape != (0,) or not S > 0 or not -255 <= Z <= 0:
                raise CorruptQuantFile(f"bad activation record {name}")
            qat.observers[name] = FrozenRange(QuantParams(
                S, Z, S * Z, S * (255 + Z), False, 0, 255))
        else:
            raise CorruptQuantFile(f"unknown record kind {kind}")
    if pos != len(data):
        raise CorruptQuantFile("trailing bytes after last record")
    expected = set(model.param_names())
    if set(model.params) != expected:
        raise CorruptQuantFile("parameter set does not match the model spec")
    for n in expected:
        if n.endswith(".weight") and n not in qat.weight_params:
            raise CorruptQuantFile(f"weight {n} is not int8")
    qat.frozen = True
    return qat


def quantized_eval(data: bytes, dataset: Dataset) -> float:
    """Accuracy of the fake-quant inference graph rebuilt from an INT8 file."""
    return load_int8(data).accuracy(dataset)
