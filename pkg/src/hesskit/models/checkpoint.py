"""Versioned binary checkpoint layout.

    magic      8 bytes  b"EHAPCKPT"
    version    u16
    spec_len   u32, then spec_len bytes of canonical JSON
    n_tensors  u64
    per tensor:
        name_len u16, UTF-8 name
        dtype    u8 (0 = FP32)
        rank     u8, then rank x u32 extents
        payload  little-endian float32

All integers are little-endian. Batch-norm running statistics are stored
as tensors named ``buffer:<name>`` after the parameters.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import CorruptCheckpoint, InvalidSpec
from .zoo import Model, ModelSpec, layer_plan

MAGIC = b"EHAPCKPT"
VERSION = 1
DTYPE_FP32 = 0
BUFFER_PREFIX = "buffer:"


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_FP32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(model: Model) -> bytes:
    spec_blob = model.spec.to_json().encode("utf-8")
    entries = [(n, model.params[n]) for n in model.param_names()]
    entries += [(BUFFER_PREFIX + n, model.buffers[n]) for n in sorted(model.buffers)]
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(spec_blob)), spec_blob,
           struct.pack("<Q", len(entries))]
    out += [_pack_tensor(n, a) for n, a in entries]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpoint(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(data: bytes) -> Model:
    r = _Reader(bytes(data))
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (spec_len,) = r.unpack("<I")
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(spec_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, InvalidSpec) as exc:
        raise CorruptCheckpoint(f"bad spec blob: {exc}") from None
    (count,) = r.unpack("<Q")
    model = Model(spec)
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpoint("bad tensor name") from None
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_FP32:
            raise CorruptCheckpoint(f"unsupported dtype code {dtype}")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
        if name.startswith(BUFFER_PREFIX):
            model.buffers[name[len(BUFFER_PREFIX):]] = arr
        else:
            model.params[name] = arr
    if r.pos != len(r.data):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    for layer in layer_plan(spec):
        shapes = {f"{layer.name}.weight": layer.weight_shape}
        if layer.bias:
            shapes[f"{layer.name}.bias"] = (layer.cout,)
        if layer.bn:
            shapes[f"{layer.name}.bn_gamma"] = shapes[f"{layer.name}.bn_beta"] = (layer.cout,)
        for n, shape in shapes.items():
            if n not in model.params or model.params[n].shape != shape:
                raise CorruptCheckpoint(f"parameter {n} missing or mis-shaped")
        if layer.bn:
            for n in (f"{layer.name}.bn_mean", f"{layer.name}.bn_var"):
                if n not in model.buffers or model.buffers[n].shape != (layer.cout,):
                    raise CorruptCheckpoint(f"buffer {n} missing or mis-shaped")
    return model
