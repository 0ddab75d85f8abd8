"""Hashing-based encoding via balanced binary regression trees.

Replaces the K distance computations of the hard encoder with L threshold
comparisons: a sub-vector walks a depth-L binary tree (left on <=) and
emits the centroid index stored at the leaf. Trees are built after the
centroids are fixed, as a supervised approximation of the argmin labels:
every level shares one split dimension, chosen greedily to minimize the
total Gini impurity of the argmin labels across that level's nodes; each
node then gets its own impurity-minimizing threshold. Leaves take the
majority argmin label of their samples (ties to the lowest index); empty
leaves inherit the nearest ancestor's majority.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .pq import encode_hard, validate_codebooks
from .tensor import F32, as_matrix


@dataclass(frozen=True)
class HashTree:
    """Depth-L tree: one split dim per level, per-node thresholds, leaf labels.

    ``thresholds`` is stored level-major: level l occupies the slice
    [2^l - 1, 2^(l+1) - 1). ``leaves`` holds 2^L centroid indices (< K).
    """

    dims: np.ndarray        # (L,) int64
    thresholds: np.ndarray  # (2^L - 1,) f32
    leaves: np.ndarray      # (2^L,) uint8

    def __post_init__(self) -> None:
        levels = self.dims.shape[0]
        if self.thresholds.shape != (2**levels - 1,):
            raise ShapeError(f"{self.thresholds.shape[0]} thresholds for {levels} levels")
        if self.leaves.shape != (2**levels,):
            raise ShapeError(f"{self.leaves.shape[0]} leaves for {levels} levels")

    @property
    def levels(self) -> int:
        return int(self.dims.shape[0])


def build_hash_tree(
    samples: np.ndarray,
    centroids: np.ndarray,
    levels: int,
    rng: np.random.Generator | None = None,
) -> HashTree:
    """Fit a tree that predicts the argmin centroid index of each sample.

    ``rng`` is accepted for interface uniformity; the construction itself
    is fully deterministic (greedy, ties to the lowest dimension/index).
    """
    samples = as_matrix(samples, "samples")
    if samples.shape[0] == 0:
        raise DataError("cannot build a hash tree from zero samples")
    centroids = np.ascontiguousarray(centroids, dtype=F32)
    if centroids.ndim != 2 or centroids.shape[1] != samples.shape[1]:
        raise ShapeError(f"centroids {centroids.shape} inconsistent with samples {samples.shape}")
    if levels < 0:
        raise ShapeError(f"levels must be >= 0, got {levels}")
    k = centroids.shape[0]
    v = samples.shape[1]

    labels = encode_hard(samples, centroids[None, :, :])[:, 0].astype(np.int64)

    n = samples.shape[0]
    node_of = np.zeros(n, dtype=np.int64)  # node index within the current level
    dims = np.empty(levels, dtype=np.int64)
    thresholds = np.empty(2**levels - 1, dtype=F32) if levels else np.empty(0, dtype=F32)

    # Majority label of the nearest non-empty ancestor, per node of the
    # current level; seeds empty leaves.
    inherited = np.full(1, _majority(labels, k), dtype=np.int64)

    offset = 0
    for level in range(levels):
        n_nodes = 2**level
        groups = [np.flatnonzero(node_of == t) for t in range(n_nodes)]

        best_dim = 0
        best_cost = np.inf
        best_thr: np.ndarray | None = None
        for j in range(v):
            cost = 0.0
            thr_j = np.zeros(n_nodes, dtype=F32)
            for t, idx in enumerate(groups):
                node_cost, thr = _best_split(samples[idx, j], labels[idx], k)
                cost += node_cost
                thr_j[t] = thr
            if cost < best_cost - 1e-12:
                best_cost = cost
                best_dim = j
                best_thr = thr_j
        dims[level] = best_dim
        thresholds[offset : offset + n_nodes] = best_thr
        offset += n_nodes

        go_right = samples[:, best_dim] > best_thr[node_of]
        node_of = node_of * 2 + go_right.astype(np.int64)

        nxt = np.full(2 * n_nodes, -1, dtype=np.int64)
        for t in range(2 * n_nodes):
            idx = np.flatnonzero(node_of == t)
            nxt[t] = _majority(labels[idx], k) if idx.size else inherited[t // 2]
        inherited = nxt

    return HashTree(
        dims=dims,
        thresholds=thresholds,
        leaves=inherited.astype(np.uint8),
    )


def _majority(labels: np.ndarray, k: int) -> int:
    """Most frequent label; ties break to the lowest index."""
    counts = np.bincount(labels, minlength=k)
    return int(np.argmax(counts))


def _best_split(values: np.ndarray, labels: np.ndarray, k: int) -> tuple[float, float]:
    """Count-weighted Gini impurity of the best threshold on one dimension.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values; comparison convention is value <= threshold goes left. Returns
    (impurity_cost, threshold). Nodes that cannot be split (empty, single
    sample, pure, or constant values) keep their unsplit impurity and a
    threshold that routes everything left.
    """
    n = values.shape[0]
    if n == 0:
        return 0.0, 0.0
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    unsplit = float(n) - float(np.sum(counts**2)) / n
    if n == 1 or unsplit == 0.0:
        return unsplit, float(values.max())

    order = np.argsort(values, kind="stable")
    sv = values[order]
    sl = labels[order]
    cuts = np.flatnonzero(sv[:-1] < sv[1:])  # split after position i
    if cuts.size == 0:
        return unsplit, float(sv[-1])

    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), sl] = 1.0
    left_counts = np.cumsum(onehot, axis=0)[cuts]       # (n_cuts, K)
    n_left = (cuts + 1).astype(np.float64)
    n_right = n - n_left
    right_counts = counts[None, :] - left_counts
    # weighted gini = n_L + n_R - sum(cL^2)/n_L - sum(cR^2)/n_R
    cost = (
        float(n)
        - np.sum(left_counts**2, axis=1) / n_left
        - np.sum(right_counts**2, axis=1) / n_right
    )
    best = int(np.argmin(cost))
    if cost[best] >= unsplit:
        return unsplit, float(sv[-1])
    pos = cuts[best]
    thr = np.float32(sv[pos]) + (np.float32(sv[pos + 1]) - np.float32(sv[pos])) / np.float32(2)
    return float(cost[best]), float(thr)


def encode_hash(a: np.ndarray, trees: list[HashTree]) -> np.ndarray:
    """Tree-traversal encoding: (N, C) uint8, one tree per codebook.

    At level l a sub-vector goes left when value[dims[l]] <= threshold and
    right otherwise; the reached leaf's stored index is emitted. Costs L
    comparisons per sub-vector, no multiplications.
    """
    a = as_matrix(a, "a")
    if not trees:
        raise ShapeError("need at least one tree")
    c_books = len(trees)
    if a.shape[1] % c_books != 0:
        raise ShapeError(f"input cols {a.shape[1]} not divisible by {c_books} trees")
    v = a.shape[1] // c_books
    n = a.shape[0]
    out = np.empty((n, c_books), dtype=np.uint8)
    for c, tree in enumerate(trees):
        block = a[:, c * v : (c + 1) * v]
        node = np.zeros(n, dtype=np.int64)
        offset = 0
        for level in range(tree.levels):
            thr = tree.thresholds[offset + node]
            node = node * 2 + (block[:, tree.dims[level]] > thr).astype(np.int64)
            offset += 2**level
        out[:, c] = tree.leaves[node]
    return out


def hash_agreement(a: np.ndarray, trees: list[HashTree], books: np.ndarray) -> float:
    """Fraction of (row, codebook) positions where hash and argmin encoding agree."""
    books = validate_codebooks(books)
    hard = encode_hard(a, books)
    hashed = encode_hash(a, trees)
    if hard.shape != hashed.shape:
        raise ShapeError(f"encoder outputs disagree in shape: {hard.shape} vs {hashed.shape}")
    return float(np.mean(hard == hashed))
