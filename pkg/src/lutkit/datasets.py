"""Bundled synthetic tasks plus CSV/IDX file ingestion.

The toy tasks (interleaved 2-D spirals, Gaussian blobs) generate
deterministically from a seed so the repo runs with zero downloads.
IDX-format files (the classic image/label layout) are supported for users
who bring their own image data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import child_rng
from .tensor import F32, load_labeled_csv


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    image_shape: tuple[int, int, int] | None = None  # (C, H, W) when image data

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.x_train.shape[1:]))


def toy_spiral(
    n_train_per_class: int = 300,
    n_test_per_class: int = 300,
    classes: int = 3,
    turns: float = 2.0,
    noise: float = 0.12,
    seed: int = 0,
) -> Dataset:
    """Interleaved 2-D spirals: class = arm, so the boundary winds with radius."""

    def arm(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in range(classes):
            t = rng.uniform(0.0, 1.0, size=n)
            r = 0.15 + 0.85 * t
            theta = 2.0 * np.pi * c / classes + turns * 2.0 * np.pi * t
            theta = theta + noise * rng.standard_normal(n)
            xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
            ys.append(np.full(n, c, dtype=np.int64))
        x = np.concatenate(xs).astype(F32)
        y = np.concatenate(ys)
        return x, y

    xtr, ytr = arm(child_rng(seed, 0), n_train_per_class)
    xte, yte = arm(child_rng(seed, 1), n_test_per_class)
    return Dataset(xtr, ytr, xte, yte, n_classes=classes)


def toy_gauss(
    n_train_per_class: int = 200,
    n_test_per_class: int = 200,
    classes: int = 3,
    spread: float = 0.35,
    radius: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian blobs placed on a circle."""

    def draw(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in range(classes):
            angle = 2.0 * np.pi * c / classes
            center = np.array([radius * np.cos(angle), radius * np.sin(angle)])
            xs.append(center + spread * rng.standard_normal((n, 2)))
            ys.append(np.full(n, c, dtype=np.int64))
        return np.concatenate(xs).astype(F32), np.concatenate(ys)

    xtr, ytr = draw(child_rng(seed, 0), n_train_per_class)
    xte, yte = draw(child_rng(seed, 1), n_test_per_class)
    return Dataset(xtr, ytr, xte, yte, n_classes=classes)


def from_csv(path: str | Path, test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Labeled CSV (header row, last column integer label), split deterministically."""
    x, y = load_labeled_csv(path)
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    n = x.shape[0]
    perm = child_rng(seed, 2).permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if train_idx.size == 0:
        raise DataError("no training rows left after split")
    classes = int(y.max()) + 1
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx], n_classes=classes)


def read_idx(path: str | Path) -> np.ndarray:
    """Read one IDX file (big-endian magic: 0, 0, dtype, ndims)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    dtype_code, ndims = raw[2], raw[3]
    dtypes = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.int16, 0x0C: np.int32, 0x0D: np.float32}
    if dtype_code not in dtypes:
        raise DataError(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
    dims = struct.unpack_from(f">{ndims}I", raw, 4)
    offset = 4 + 4 * ndims
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(raw, dtype=np.dtype(dtypes[dtype_code]).newbyteorder(">"), count=count, offset=offset)
    if data.size != count:
        raise DataError(f"{path}: truncated payload")
    return data.reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 IDX file (for fixtures and exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 0x08, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def from_idx(
    train_images: str | Path,
    train_labels: str | Path,
    test_images: str | Path | None = None,
    test_labels: str | Path | None = None,
) -> Dataset:
    """IDX image/label pairs; pixels scaled to [0, 1], NCHW single channel."""

    def load_pair(img_path, lbl_path):
        images = read_idx(img_path)
        labels = read_idx(lbl_path)
        if images.ndim != 3:
            raise DataError(f"{img_path}: expected rank-3 image file, got rank {images.ndim}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise DataError(f"{lbl_path}: label count does not match image count")
        x = (images.astype(F32) / 255.0)[:, None, :, :]
        return x, labels.astype(np.int64)

    xtr, ytr = load_pair(train_images, train_labels)
    if test_images is not None and test_labels is not None:
        xte, yte = load_pair(test_images, test_labels)
    else:
        xte, yte = xtr, ytr
    classes = int(max(ytr.max(), yte.max())) + 1
    return Dataset(xtr, ytr, xte, yte, n_classes=classes, image_shape=xtr.shape[1:])


def load_task(spec: str, seed: int = 0) -> Dataset:
    """Resolve a --task string: toy-spiral | toy-gauss | csv:FILE | idx:IMG,LBL[,IMG,LBL]."""
    if spec == "toy-spiral":
        return toy_spiral(seed=seed)
    if spec == "toy-gauss":
        return toy_gauss(seed=seed)
    if spec.startswith("csv:"):
        return from_csv(spec[4:], seed=seed)
    if spec.startswith("idx:"):
        parts = spec[4:].split(",")
        if len(parts) == 2:
            return from_idx(parts[0], parts[1])
        if len(parts) == 4:
            return from_idx(*parts)
        raise ConfigError("idx task needs 'idx:IMAGES,LABELS' or 'idx:IMG,LBL,IMG,LBL'")
    raise ConfigError(f"unknown task {spec!r}")
