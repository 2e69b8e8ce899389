"""Desk-scale datasets: synthetic spirals, parity bits and a tiny raw image format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass

import numpy as np

TINY_IMAGE_MAGIC = b"TINYIMG1"
DATASET_KINDS = ("synthetic-spirals", "synthetic-parity", "tiny-image-file")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic-spirals"
    size: int = 2500
    noise: float = 0.1
    classes: int = 2
    seed: int = 0
    dim: int = 8  # parity: number of bits
    path: str | None = None  # tiny-image-file only
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.size < 4:
            raise ValueError("dataset size must be at least 4")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.kind == "synthetic-parity" and (self.dim < 1 or self.classes != 2):
            raise ValueError("parity data has two classes and at least one bit")
        if self.kind == "tiny-image-file" and not self.path:
            raise ValueError("tiny-image-file needs a path")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    @property
    def input_shape(self):
        return tuple(self.X_train.shape[1:])

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.X_train, self.y_train, self.X_val, self.y_val):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def spirals(n, classes=2, noise=0.1, rng=None):
    """Interleaved spiral arms in the plane, one arm per class."""
    rng = rng if rng is not None else np.random.default_rng(0)
    y = np.arange(n) % classes
    t = rng.uniform(0.0, 1.0, n)
    r = 0.2 + 0.8 * t
    theta = 3.0 * np.pi * t + 2.0 * np.pi * y / classes
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    X += noise * rng.normal(size=X.shape)
    perm = rng.permutation(n)
    return X[perm], y[perm].astype(np.float64)


def parity(n, dim=8, noise=0.0, rng=None):
    """Random bit vectors in {-1, 1}; the label is the parity of the bits."""
    rng = rng if rng is not None else np.random.default_rng(0)
    bits = rng.integers(0, 2, size=(n, dim))
    y = bits.sum(axis=1) % 2
    X = 2.0 * bits - 1.0 + noise * rng.normal(size=bits.shape)
    return X, y.astype(np.float64)


def write_tiny_images(path, images, labels, num_classes):
    """Header ``magic, n, c, h, w, classes`` (u32 LE), then per record a u8
    label followed by ``c*h*w`` u8 pixels."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("images must be (N, C, H, W)")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(TINY_IMAGE_MAGIC + struct.pack("<5I", n, c, h, w, num_classes))
        for img, lab in zip(images.astype(np.uint8), labels):
            fh.write(struct.pack("<B", int(lab)) + img.tobytes())


def read_tiny_images(path):
    data = open(path, "rb").read()
    if data[:8] != TINY_IMAGE_MAGIC:
        raise ValueError(f"{path}: not a tiny-image file")
    if len(data) < 28:
        raise ValueError(f"{path}: truncated header")
    n, c, h, w, k = struct.unpack_from("<5I", data, 8)
    rec = 1 + c * h * w
    if len(data) != 28 + n * rec:
        raise ValueError(f"{path}: expected {n} records of {rec} bytes")
    raw = np.frombuffer(data, dtype=np.uint8, offset=28).reshape(n, rec)
    labels = raw[:, 0].astype(np.float64)
    if labels.size and labels.max() >= k:
        raise ValueError(f"{path}: label out of range")
    X = raw[:, 1:].reshape(n, c, h, w).astype(np.float64) / 255.0
    return X, labels, k


def split(X, y, val_fraction, rng):
    n = len(X)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    perm = rng.permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    return X[tr], y[tr], X[val], y[val]


def load_dataset(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "synthetic-spirals":
        X, y = spirals(spec.size, spec.classes, spec.noise, rng)
        k = spec.classes
    elif spec.kind == "synthetic-parity":
        X, y = parity(spec.size, spec.dim, spec.noise, rng)
        k = 2
    else:
        X, y, k = read_tiny_images(spec.path)
        X = X - X.mean(axis=(0, 2, 3), keepdims=True)
    return Dataset(*split(X, y, spec.val_fraction, rng), num_classes=k)
