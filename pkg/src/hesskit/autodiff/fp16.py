"""Value-exact emulation of IEEE 754 binary16 storage."""

from __future__ import annotations

import numpy as np

FP16_MAX = 65504.0
FP16_MIN_SUBNORMAL = 2.0**-24
FP16_EPS = 2.0**-10


def round_fp16(x):
    """Round to the nearest binary16 value (ties to even) and widen back.

    Works on scalars and arrays. Magnitudes that round past 65504 become
    +/-inf, subnormals are kept, NaN stays NaN.
    """
    arr = np.asarray(x, dtype=np.float64)
    _, e = np.frexp(arr)
    # spacing of binary16 values around arr: 2^(e-11) for normals, 2^-24 below 2^-14
    q = np.maximum(e - 11, -24)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.ldexp(np.round(np.ldexp(arr, -q)), q)
        big = np.abs(out) > FP16_MAX
    if np.any(big):
        out = np.where(big, np.copysign(np.inf, out), out)
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def round_fp32(x):
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return arr.astype(np.float32).astype(np.float64)


def is_fp16_representable(x) -> bool:
    arr = np.asarray(x, dtype=np.float64)
    r = round_fp16(arr)
    return bool(np.all((r == arr) | (np.isnan(arr) & np.isnan(r))))
