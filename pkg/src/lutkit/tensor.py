"""Dense matrix/tensor primitives and on-disk formats.

Conventions used package-wide:

* matrices are 2-D ``float32`` numpy arrays, row-major, densely packed;
* image batches are 4-D ``float32`` arrays in NCHW order;
* ``matmul_ref`` is the exact dense baseline every approximation is
  measured against: f32 accumulation, summation strictly in ascending-k
  order, bitwise deterministic for fixed inputs.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError

F32 = np.float32

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def as_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a contiguous (rows, cols) float32 array."""
    a = np.ascontiguousarray(a, dtype=F32)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def im2col(
    x: np.ndarray,
    kernel_h: int,
    kernel_w: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Unroll receptive-field patches of an NCHW batch into matrix rows.

    Output has ``n * h_out * w_out`` rows and ``channels * kernel_h *
    kernel_w`` columns. Within a row the patch is laid out channel-major:
    all kernel_h x kernel_w values of channel 0 first (row-major within the
    window), then channel 1, and so on. Zero padding contributes literal
    zeros.
    """
    x = np.ascontiguousarray(x, dtype=F32)
    if x.ndim != 4:
        raise ShapeError(f"im2col input must be 4-D NCHW, got shape {x.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    n, channels, height, width = x.shape
    h_pad = height + 2 * pad
    w_pad = width + 2 * pad
    if kernel_h < 1 or kernel_w < 1 or kernel_h > h_pad or kernel_w > w_pad:
        raise ShapeError(
            f"kernel {kernel_h}x{kernel_w} does not fit padded input {h_pad}x{w_pad}"
        )
    h_out = (h_pad - kernel_h) // stride + 1
    w_out = (w_pad - kernel_w) // stride + 1

    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    # Gather one strided slice per kernel offset; patch layout (c, kh, kw).
    cols = np.empty((n, h_out, w_out, channels, kernel_h, kernel_w), dtype=F32)
    for kh in range(kernel_h):
        for kw in range(kernel_w):
            window = x[:, :, kh : kh + stride * h_out : stride, kw : kw + stride * w_out : stride]
            cols[:, :, :, :, kh, kw] = window.transpose(0, 2, 3, 1)
    return np.ascontiguousarray(
        cols.reshape(n * h_out * w_out, channels * kernel_h * kernel_w)
    )


def col2im(
    cols: np.ndarray,
    input_shape: tuple[int, int, int, int],
    kernel_h: int,
    kernel_w: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col` (used by convolution backward)."""
    n, channels, height, width = input_shape
    h_pad = height + 2 * pad
    w_pad = width + 2 * pad
    h_out = (h_pad - kernel_h) // stride + 1
    w_out = (w_pad - kernel_w) // stride + 1
    if cols.shape != (n * h_out * w_out, channels * kernel_h * kernel_w):
        raise ShapeError(f"col matrix {cols.shape} inconsistent with input {input_shape}")
    blocks = cols.reshape(n, h_out, w_out, channels, kernel_h, kernel_w)
    padded = np.zeros((n, channels, h_pad, w_pad), dtype=np.float64)
    for kh in range(kernel_h):
        for kw in range(kernel_w):
            padded[:, :, kh : kh + stride * h_out : stride, kw : kw + stride * w_out : stride] += (
                blocks[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
            )
    if pad > 0:
        padded = padded[:, :, pad : pad + height, pad : pad + width]
    return padded.astype(F32)


def matmul_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact dense product with f32 accumulation in ascending-k order.

    Deliberately avoids BLAS so the summation order is pinned: for every
    output element the products a[n,k]*b[k,m] are added one k at a time,
    k ascending. This is the ground-truth baseline for correctness and
    speed comparisons.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=F32)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def split_subvectors(a: np.ndarray, v: int) -> list[np.ndarray]:
    """Split a matrix into D/v column blocks of width ``v`` (views, no copy)."""
    a = as_matrix(a, "a")
    if v < 1:
        raise ConfigError(f"sub-vector length must be >= 1, got {v}")
    if a.shape[1] % v != 0:
        raise ConfigError(f"cols {a.shape[1]} not divisible by sub-vector length {v}")
    return [a[:, c * v : (c + 1) * v] for c in range(a.shape[1] // v)]


def write_tnsr(path: str | Path, array: np.ndarray) -> None:
    """Write a float32 tensor in the TNSR format.

    Layout (little-endian): magic 'TNSR', u32 version=1, u32 rank,
    u64 dims[rank], then the f32 payload in C order.
    """
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TNSR_MAGIC)
        f.write(struct.pack("<II", TNSR_VERSION, array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(array.tobytes())


def read_tnsr(path: str | Path) -> np.ndarray:
    """Read a TNSR file back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != TNSR_MAGIC:
        raise DataError(f"{path}: not a TNSR file")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != TNSR_VERSION:
        raise DataError(f"{path}: unsupported TNSR version {version}")
    dims = struct.unpack_from(f"<{rank}Q", raw, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if payload.size != count:
        raise DataError(f"{path}: truncated payload")
    return payload.reshape(dims).astype(F32)


def load_labeled_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load a labeled dataset from CSV: header row, last column = int label."""
    rows = []
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            for line in reader:
                if line:
                    rows.append([float(v) for v in line])
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    features = data[:, :-1].astype(F32)
    labels = np.rint(data[:, -1]).astype(np.int64)
    return features, labels
