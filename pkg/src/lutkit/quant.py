"""Symmetric INT8 scalar quantization of lookup tables.

One scale per table: scale = max|entry| / 127, zero point fixed at 0.
Quantized values are clamped to [-127, 127]; the -128 code is deliberately
unused so that INT16 partial sums of up to 258 entries cannot overflow in
the gather/accumulate kernel. Rounding is round-half-to-even for
cross-platform bit-exactness. Centroids are never quantized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .tensor import F32

QMAX = 127


@dataclass(frozen=True)
class LookupTableI8:
    """Quantized lookup table: (C, K, M) int8 entries and one f32 scale."""

    q: np.ndarray
    scale: np.float32

    def __post_init__(self) -> None:
        if self.q.ndim != 3 or self.q.dtype != np.int8:
            raise ShapeError(f"quantized table must be int8 (C, K, M), got {self.q.dtype} {self.q.shape}")
        if not self.scale > 0:
            raise DataError(f"scale must be positive, got {self.scale}")
        if self.q.size and int(self.q.min()) < -QMAX:
            # -128 is never produced; |q| <= 127 is what makes INT16 partial
            # sums of up to 258 entries provably overflow-free
            raise DataError("quantized entries must lie in [-127, 127]")


def quantize_table(table: np.ndarray) -> LookupTableI8:
    """Quantize a float32 table: q = round_half_even(entry / scale), |q| <= 127.

    An all-zero table gets the sentinel scale 1.0 and dequantizes to zero.
    """
    table = np.ascontiguousarray(table, dtype=F32)
    if table.ndim != 3:
        raise ShapeError(f"table must be (C, K, M), got {table.shape}")
    if not np.all(np.isfinite(table)):
        raise DataError("table contains NaN or infinity")
    maxabs = float(np.max(np.abs(table))) if table.size else 0.0
    if maxabs == 0.0:
        scale = np.float32(1.0)
    else:
        scale = np.float32(maxabs / QMAX)
    q = np.rint(table.astype(np.float64) / float(scale))
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return LookupTableI8(q=q, scale=scale)


def dequantize(qt: LookupTableI8) -> np.ndarray:
    """Back to float32: entry * scale."""
    return qt.q.astype(F32) * np.float32(qt.scale)
