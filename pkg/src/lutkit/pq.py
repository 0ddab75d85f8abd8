"""Vanilla product quantization.

Splits D-dimensional rows into C = D/V sub-vectors, learns one K-centroid
codebook per sub-vector position with k-means, encodes rows as nearest
centroid indices, and approximates A @ B by aggregating precomputed
centroid-by-weight dot products from a lookup table.

Everything here is the unoptimized reference path; the fast kernels in
:mod:`lutkit.kernels` are contracted to reproduce its observable behaviour
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, ShapeError
from .tensor import F32, as_matrix

MAX_CENTROIDS = 256  # encodings are stored as u8 indices


@dataclass(frozen=True)
class PqConfig:
    """Quantization geometry: sub-vector length ``v`` and centroids ``k``."""

    v: int
    k: int

    def __post_init__(self) -> None:
        if self.v < 1:
            raise ConfigError(f"sub-vector length must be >= 1, got {self.v}")
        if not 1 <= self.k <= MAX_CENTROIDS:
            raise ConfigError(f"centroid count must be in [1, {MAX_CENTROIDS}], got {self.k}")

    def codebook_count(self, d: int) -> int:
        if d % self.v != 0:
            raise ConfigError(f"dimension {d} not divisible by sub-vector length {self.v}")
        return d // self.v


def validate_codebooks(books: np.ndarray) -> np.ndarray:
    books = np.ascontiguousarray(books, dtype=F32)
    if books.ndim != 3:
        raise ShapeError(f"codebooks must have shape (C, K, V), got {books.shape}")
    if books.shape[1] > MAX_CENTROIDS:
        raise ConfigError(f"K={books.shape[1]} exceeds the u8 encoding limit {MAX_CENTROIDS}")
    return books


def subvector_distances(a: np.ndarray, books: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances of every sub-vector to every centroid.

    Returns an (N, C, K) float64 array computed from the literal squared
    differences. This is the reference distance definition: hard encoding,
    soft encoding, and the fast search kernel must all agree with argmins
    of these values.
    """
    a = as_matrix(a, "a")
    books = validate_codebooks(books)
    c_books, k, v = books.shape
    if a.shape[1] != c_books * v:
        raise ShapeError(f"input cols {a.shape[1]} != C*V = {c_books}*{v}")
    n = a.shape[0]
    out = np.empty((n, c_books, k), dtype=np.float64)
    a64 = a.astype(np.float64)
    books64 = books.astype(np.float64)
    for c in range(c_books):
        diff = a64[:, c * v : (c + 1) * v, None] - books64[c].T[None, :, :]
        out[:, c, :] = np.einsum("nvk,nvk->nk", diff, diff)
    return out


def kmeans_fit(
    samples: np.ndarray,
    k: int,
    max_iters: int = 25,
    rng: np.random.Generator | None = None,
    return_history: bool = False,
):
    """Lloyd's k-means with k-means++ seeding.

    Runs at most ``max_iters`` assignment/update rounds and stops early at
    an assignment fixpoint. Empty clusters are re-seeded to the sample
    farthest from its current centroid, which keeps the within-cluster
    squared-distance objective non-increasing.

    Returns the (k, V) float32 centroids; with ``return_history=True`` also
    the objective value recorded after each assignment step.
    """
    samples = np.ascontiguousarray(samples, dtype=F32)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be 2-D, got shape {samples.shape}")
    n = samples.shape[0]
    if n == 0:
        raise DataError("k-means received an empty sample set")
    if not np.all(np.isfinite(samples)):
        raise DataError("k-means samples contain NaN or infinity")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds sample count {n}")
    if rng is None:
        rng = np.random.default_rng(0)

    x = samples.astype(np.float64)
    centers = _kmeanspp_init(x, k, rng)

    history: list[float] = []
    prev_assign: np.ndarray | None = None
    for _ in range(max(1, max_iters)):
        d2 = _pairwise_sqdist(x, centers)
        assign = np.argmin(d2, axis=1)
        mind2 = d2[np.arange(n), assign]

        # Re-seed empty clusters to the currently worst-quantized samples.
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            far = int(np.argmax(mind2))
            centers[empty] = x[far]
            assign[far] = empty
            mind2[far] = 0.0
            counts = np.bincount(assign, minlength=k)

        history.append(float(mind2.sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign

        for j in range(k):
            members = x[assign == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)

    centroids = centers.astype(F32)
    if return_history:
        return centroids, history
    return centroids


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            r = rng.random() * total
            j = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            j = min(j, n - 1)
        else:
            j = int(rng.integers(n))
        centers[i] = x[j]
        np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1), out=d2)
    return centers


def _pairwise_sqdist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def encode_hard(a: np.ndarray, books: np.ndarray) -> np.ndarray:
    """Nearest-centroid indices, (N, C) uint8; ties break to the lowest k."""
    d = subvector_distances(a, books)
    return np.argmin(d, axis=2).astype(np.uint8)


def build_table(b: np.ndarray, books: np.ndarray) -> np.ndarray:
    """Precompute the (C, K, M) table of centroid/weight dot products.

    T[c, k, m] = sum_j P[c, k, j] * B[c*V + j, m] with f32 accumulation in
    ascending-j order.
    """
    b = as_matrix(b, "b")
    books = validate_codebooks(books)
    c_books, k, v = books.shape
    if b.shape[0] != c_books * v:
        raise ShapeError(f"weight rows {b.shape[0]} != C*V = {c_books}*{v}")
    m = b.shape[1]
    table = np.zeros((c_books, k, m), dtype=F32)
    for c in range(c_books):
        for j in range(v):
            table[c] += books[c, :, j : j + 1] * b[c * v + j : c * v + j + 1, :]
    return table


def lut_matmul_ref(enc: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Aggregate table rows selected by an encoding: out[n] = sum_c T[c, enc[n,c]].

    f32 accumulation in ascending-c order.
    """
    enc = np.ascontiguousarray(enc)
    if enc.ndim != 2:
        raise ShapeError(f"encoding must be (N, C), got {enc.shape}")
    if table.ndim != 3:
        raise ShapeError(f"table must be (C, K, M), got {table.shape}")
    c_books, k, m = table.shape
    if enc.shape[1] != c_books:
        raise ShapeError(f"encoding C={enc.shape[1]} != table C={c_books}")
    if enc.size and int(enc.max()) >= k:
        raise CorruptionError(f"encoding index {int(enc.max())} >= K={k}")
    out = np.zeros((enc.shape[0], m), dtype=F32)
    for c in range(c_books):
        out += table[c][enc[:, c]]
    return out


def pq_amm(
    a: np.ndarray, b: np.ndarray, cfg: PqConfig, books: np.ndarray
) -> np.ndarray:
    """PQ approximate matmul: encode A, build the table for B, aggregate."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    books = validate_codebooks(books)
    c_books = cfg.codebook_count(a.shape[1])
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    if books.shape[0] != c_books or books.shape[1] != cfg.k or books.shape[2] != cfg.v:
        raise ShapeError(
            f"codebooks {books.shape} inconsistent with config (C={c_books}, K={cfg.k}, V={cfg.v})"
        )
    return lut_matmul_ref(encode_hard(a, books), build_table(b, books))


def mse(approx: np.ndarray, exact: np.ndarray) -> float:
    """Mean squared elementwise difference, accumulated in float64."""
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    if approx.shape != exact.shape:
        raise ShapeError(f"shape mismatch: {approx.shape} vs {exact.shape}")
    diff = approx.astype(np.float64) - exact.astype(np.float64)
    return float(np.mean(diff * diff))
