"""Dataset ingestion (IDX, CIFAR-10 binary), batching and image corruptions.

Pixels live in [0, 1] here; any mean/std normalization happens in the
trainer so corruption arithmetic always works in a fixed domain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

CORRUPTIONS = ("gaussian_noise", "brightness", "contrast", "pixelate")
# index 0 is the identity level, 1..5 the graded severities
SEVERITY_TABLES = {
    "gaussian_noise": (0.0, 0.04, 0.06, 0.08, 0.09, 0.10),
    "brightness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "contrast": (1.0, 0.75, 0.5, 0.4, 0.3, 0.15),
    "pixelate": (1, 2, 2, 4, 4, 8),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x c x h x w, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(f"dataset {self.name!r}: images {self.images.shape} vs labels {self.labels.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise FormatError(f"dataset {self.name!r}: pixels outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"dataset {self.name!r}: labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: Optional[int] = None, indices=None) -> "Dataset":
        idx = np.arange(min(n, len(self))) if indices is None else np.asarray(indices)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _read_header(f, n_ints: int, path) -> Tuple[int, ...]:
    raw = f.read(4 * n_ints)
    if len(raw) < 4 * n_ints:
        raise FormatError(f"{path}: truncated IDX header")
    return tuple(int.from_bytes(raw[4 * i : 4 * i + 4], "big") for i in range(n_ints))


def _idx_labels(path, limit):
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        magic, count = _read_header(f, 2, path)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: wrong IDX label magic: expected 0x{IDX_LABEL_MAGIC:08x}, got 0x{magic:08x}")
        if size - 8 < count:
            raise FormatError(f"{path}: truncated: header declares {count} labels, file holds {size - 8}")
        n = count if limit is None else min(limit, count)
        return count, np.frombuffer(f.read(n), dtype=np.uint8).astype(np.int64)


def _idx_images(path, limit):
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        magic, count, rows, cols = _read_header(f, 4, path)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: wrong IDX image magic: expected 0x{IDX_IMAGE_MAGIC:08x}, got 0x{magic:08x}")
        need = count * rows * cols
        if size - 16 < need:
            raise FormatError(f"{path}: truncated: header declares {need} pixel bytes, file holds {size - 16}")
        n = count if limit is None else min(limit, count)
        raw = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
        return count, raw.reshape(n, 1, rows, cols)


def load_idx(images_path, labels_path, limit: Optional[int] = None, name: str = "idx",
             split: str = "", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair; ``limit`` keeps the first N samples."""
    n_img, images = _idx_images(images_path, limit)
    n_lab, labels = _idx_labels(labels_path, limit)
    if n_img != n_lab:
        raise FormatError(f"count mismatch: {images_path} has {n_img} images, {labels_path} has {n_lab} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels, name=name, split=split, num_classes=num_classes)


def load_cifar10_bin(paths: Sequence, limit: Optional[int] = None, name: str = "cifar10",
                     split: str = "") -> Dataset:
    chunks = []
    for path in paths:
        size = os.path.getsize(path)
        if size == 0 or size % CIFAR_RECORD:
            raise FormatError(f"{path}: length {size} is not a positive multiple of {CIFAR_RECORD}")
        with open(path, "rb") as f:
            chunks.append(np.frombuffer(f.read(), dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"CIFAR-10 record {bad} has label byte {labels[bad]} (must be < 10)")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, name=name, split=split, num_classes=10)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size: int, shuffle_seed: Optional[int] = None,
            epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)``; the last batch may be partial.

    ``shuffle_seed=None`` keeps dataset order.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


@dataclass(frozen=True)
class CorruptionSpec:
    """``severity`` 1-5 are the graded levels; 0 is an identity level used for testing."""

    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ParameterError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ParameterError(f"severity must be an integer in [0, 5], got {self.severity!r}")

    @property
    def level(self):
        return SEVERITY_TABLES[self.kind][self.severity]


def pixelate(x: np.ndarray, f: int) -> np.ndarray:
    """Block-mean downsample by ``f`` then nearest-neighbour upsample; edge blocks may be partial."""
    if f == 1:
        return x.copy()
    h, w = x.shape[-2:]
    rows = np.arange(0, h, f)
    cols = np.arange(0, w, f)
    sums = np.add.reduceat(np.add.reduceat(x, rows, axis=-2), cols, axis=-1)
    rh = np.diff(np.append(rows, h))
    cw = np.diff(np.append(cols, w))
    means = sums / np.outer(rh, cw)
    return np.repeat(np.repeat(means, rh, axis=-2), cw, axis=-1)


def corrupt(ds: Dataset, spec: CorruptionSpec) -> Dataset:
    x = ds.images
    level = spec.level
    if spec.kind == "gaussian_noise":
        if level == 0:
            out = x.copy()
        else:
            noise = np.random.default_rng(spec.seed).normal(0.0, level, size=x.shape)
            out = np.clip(x + noise, 0.0, 1.0)
    elif spec.kind == "brightness":
        out = np.clip(x + level, 0.0, 1.0)
    elif spec.kind == "contrast":
        out = x.copy() if level == 1.0 else np.clip((x - 0.5) * level + 0.5, 0.0, 1.0)
    else:
        out = np.clip(pixelate(x, level), 0.0, 1.0)
    return replace(ds, images=out, name=f"{ds.name}+{spec.kind}{spec.severity}")
