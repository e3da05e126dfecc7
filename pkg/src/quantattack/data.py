"""Datasets: synthetic image classes, CIFAR-10 binary records, stratified splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def checksum(self) -> str:
        h = hashlib.sha256(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def _smooth_pattern(rng, size: int, yy, xx) -> np.ndarray:
    img = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
    return (img - img.min()) / max(img.max() - img.min(), 1e-12)


def gen_synthetic(num_classes: int = 4, per_class: int = 150, size: int = 16, channels: int = 3,
                  noise_std: float = 0.15, seed: int = 0, class_contrast: float = 0.2) -> Dataset:
    """Class prototypes built from random low-frequency cosines, plus clamped Gaussian pixel noise.

    Each prototype channel mixes a pattern shared by all classes with a
    class-specific one; ``class_contrast`` is the weight of the class-specific
    part (1.0 gives fully independent prototypes).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if size < 8:
        raise ValueError("size must be >= 8")
    if not 0 < class_contrast <= 1:
        raise ValueError(f"class_contrast must be in (0, 1], got {class_contrast}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    shared = np.stack([_smooth_pattern(rng, size, yy, xx) for _ in range(channels)])
    protos = np.empty((num_classes, channels, size, size))
    for k in range(num_classes):
        for c in range(channels):
            own = _smooth_pattern(rng, size, yy, xx)
            protos[k, c] = 0.15 + 0.7 * ((1 - class_contrast) * shared[c] + class_contrast * own)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = protos[labels]
    if noise_std > 0:
        images = images + rng.normal(0.0, noise_std, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], num_classes, f"synthetic-{num_classes}c-{size}px")


def parse_cifar10_binary(buf: bytes, name: str = "cifar10") -> Dataset:
    """Parse CIFAR-10 binary records: 1 label byte then 3x32x32 channel-major pixels."""
    buf = bytes(buf)
    if len(buf) % CIFAR_RECORD:
        off = (len(buf) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(f"truncated CIFAR-10 record at offset {off} "
                          f"(length {len(buf)} is not a multiple of {CIFAR_RECORD})")
    n = len(buf) // CIFAR_RECORD
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"record {i}: label byte {labels[i]} > 9")
    images = raw[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, name)


def serialize_cifar10_binary(data: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar10_binary`; pixels are rounded to bytes."""
    if data.image_shape != (3, CIFAR_SIDE, CIFAR_SIDE) or data.num_classes > 10:
        raise FormatError(f"dataset shape {data.image_shape} / {data.num_classes} classes "
                          "cannot be written as CIFAR-10 records")
    px = np.rint(data.images * 255.0).astype(np.uint8).reshape(len(data), -1)
    out = np.concatenate([data.labels.astype(np.uint8)[:, None], px], axis=1)
    return out.tobytes()


def load_cifar10(paths, limit: int | None = None) -> Dataset:
    chunks = [Path(p).read_bytes() for p in ([paths] if isinstance(paths, (str, Path)) else paths)]
    data = parse_cifar10_binary(b"".join(chunks))
    return data if limit is None else data.subset(np.arange(min(limit, len(data))))


def split(data: Dataset, test_fraction: float, seed: int = 0) -> tuple:
    """Stratified seeded split into (train, test)."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    classes = [c for c in range(data.num_classes) if np.any(data.labels == c)]
    counts = np.array([np.sum(data.labels == c) for c in classes])
    # largest-remainder allocation keeps the total test size at round(f * N)
    quota = test_fraction * counts
    alloc = np.floor(quota).astype(int)
    extra = int(round(test_fraction * counts.sum())) - alloc.sum()
    for j in np.argsort(-(quota - alloc), kind="stable")[:max(extra, 0)]:
        alloc[j] += 1
    train_idx, test_idx = [], []
    for c, k in zip(classes, alloc):
        idx = rng.permutation(np.nonzero(data.labels == c)[0])
        if k == 0 or k == idx.size:
            raise ValueError(f"split would empty class {c} ({idx.size} samples)")
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    return data.subset(tr, data.name + "-train"), data.subset(te, data.name + "-test")
