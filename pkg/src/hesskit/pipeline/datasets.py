"""Dataset ingestion: seeded synthetic generators and IDX / CIFAR-10 binary readers."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CorruptDataset, UnsupportedFormat
from ..models.training import Dataset

FORMATS = ("synthetic-blobs", "synthetic-rings", "idx-images", "cifar10-binary")
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class DatasetSpec:
    kind: str
    n: int = 2000
    classes: int = 2
    seed: int = 0
    dims: int = 2
    image_shape: tuple | None = None
    noise: float = 1.0
    test_fraction: float = 0.25
    path: str | None = None
    labels_path: str | None = None


@dataclass
class DatasetSplit:
    train: Dataset
    test: Dataset
    num_classes: int
    input_shape: tuple


def _split(x: np.ndarray, y: np.ndarray, test_fraction: float, num_classes: int) -> DatasetSplit:
    n_test = int(round(len(y) * test_fraction))
    n_train = len(y) - n_test
    return DatasetSplit(Dataset(x[:n_train], y[:n_train]), Dataset(x[n_train:], y[n_train:]),
                        num_classes, tuple(x.shape[1:]))


def synthetic_blobs(n: int, classes: int, seed: int, dims: int = 2, noise: float = 1.0):
    """Isotropic Gaussian clusters with centers on a circle of radius 4."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dims))
    centers[:, 0] = 4.0 * np.cos(angles)
    if dims > 1:
        centers[:, 1] = 4.0 * np.sin(angles)
    y = rng.integers(0, classes, size=n)
    x = centers[y] + noise * rng.standard_normal((n, dims))
    return x, y


def synthetic_grating_images(n: int, classes: int, seed: int, shape: tuple, noise: float = 1.0):
    """Per-class oriented colour gratings with random phase plus pixel noise.

    The random phase makes class identity a local texture property, which a
    convolution followed by global pooling can pick up.
    """
    c, h, w = shape
    rng = np.random.default_rng(seed)
    angles = np.pi * np.arange(classes) / classes
    freqs = 1.2 + 0.6 * (np.arange(classes) % 2)
    colors = rng.uniform(-1.0, 1.0, size=(classes, c))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True) / np.sqrt(c)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = rng.integers(0, classes, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    proj = np.cos(angles)[y, None, None] * xx + np.sin(angles)[y, None, None] * yy
    wave = np.sin(freqs[y, None, None] * proj + phase[:, None, None])
    x = colors[y][:, :, None, None] * wave[:, None] + noise * rng.standard_normal((n, c, h, w))
    return x, y


def synthetic_rings(n: int, classes: int, seed: int, noise: float = 0.15):
    """Concentric 2-d rings, one radius per class."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = 1.0 + y + noise * rng.standard_normal(n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), y


def read_idx(path) -> np.ndarray:
    """Read an IDX file holding unsigned bytes (0x0801 labels or 0x0803 images)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CorruptDataset(f"{path}: file too short for IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype != 0x08 or ndim not in (1, 3):
        raise CorruptDataset(f"{path}: bad IDX magic 0x{data[:4].hex()}")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise CorruptDataset(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    count = int(np.prod(dims))
    if len(data) - head != count:
        raise CorruptDataset(f"{path}: expected {count} payload bytes, found {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims)


def read_cifar10_binary(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise CorruptDataset(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise CorruptDataset(f"{path}: label out of range 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_dataset(spec: DatasetSpec) -> DatasetSplit:
    """Deterministic train/test split; the last ``test_fraction`` of samples is the test set."""
    kind = spec.kind
    if kind == "synthetic-blobs":
        if spec.image_shape:
            x, y = synthetic_grating_images(spec.n, spec.classes, spec.seed, tuple(spec.image_shape), spec.noise)
        else:
            x, y = synthetic_blobs(spec.n, spec.classes, spec.seed, spec.dims, spec.noise)
        return _split(x, y, spec.test_fraction, spec.classes)
    if kind == "synthetic-rings":
        x, y = synthetic_rings(spec.n, spec.classes, spec.seed, 0.15 * spec.noise)
        return _split(x, y, spec.test_fraction, spec.classes)
    if kind == "idx-images":
        if not spec.path or not spec.labels_path:
            raise CorruptDataset("idx-images needs both an images path and a labels path")
        images = read_idx(spec.path)
        labels = read_idx(spec.labels_path)
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise CorruptDataset("IDX image/label counts disagree")
        x = images[:, None].astype(np.float64) / 255.0
        return _split(x, labels.astype(np.int64), spec.test_fraction, int(labels.max()) + 1)
    if kind == "cifar10-binary":
        if not spec.path:
            raise CorruptDataset("cifar10-binary needs a path")
        images, labels = read_cifar10_binary(spec.path)
        x = images.astype(np.float64) / 255.0
        return _split(x, labels, spec.test_fraction, 10)
    raise UnsupportedFormat(f"unknown dataset kind {kind!r}; expected one of {', '.join(FORMATS)}")
