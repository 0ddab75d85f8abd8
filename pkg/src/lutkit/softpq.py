"""Differentiable centroid learning.

The non-differentiable nearest-centroid encoder is trained through a
two-faced estimator: the forward pass uses the hard argmin encoding (what
inference executes), while the backward pass differentiates a softmax
relaxation of the same distances,

    soft[n, c, k] = softmax_k( -||a_c[n] - P[c, k]||^2 / t ),

with a per-layer temperature t that is itself learned. The two passes are
glued by a stop-gradient: the forward value is hard, every gradient flows
through the soft path. Gradients reach the centroids twice, once through
the encoding distances and once through the table entries, and also reach
the weight matrix (tables are rebuilt from centroids and weights after
every optimizer step).

All backward arithmetic runs in float64 and is emitted as float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .pq import PqConfig, build_table, kmeans_fit, lut_matmul_ref, subvector_distances, validate_codebooks
from .quant import LookupTableI8, dequantize, quantize_table
from .tensor import F32, as_matrix, split_subvectors


@dataclass
class Temperature:
    """Softmax temperature parameterized as t = exp(theta), so t > 0 always."""

    theta: float = 0.0

    @property
    def t(self) -> float:
        return float(math.exp(self.theta))

    def set_t(self, t: float) -> None:
        if not (t > 0.0 and math.isfinite(t)):
            raise ConfigError(f"temperature must be positive and finite, got {t}")
        self.theta = float(math.log(t))


def encode_soft(a: np.ndarray, books: np.ndarray, t: float) -> np.ndarray:
    """Softmax relaxation of the hard encoding: (N, C, K) float32 probabilities.

    Numerically stable: the per-row maximum logit is subtracted before
    exponentiation, so every (n, c) row sums to 1.
    """
    if not (t > 0.0 and np.isfinite(t)):
        raise ConfigError(f"temperature must be positive and finite, got {t}")
    d = subvector_distances(a, books)
    if not np.all(np.isfinite(d)):
        raise DataError("non-finite distances in soft encoding")
    return _stable_softmax(-d / t).astype(F32)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def soft_aggregate(soft: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Probability-weighted table aggregation: out[n] = sum_c sum_k soft[n,c,k] T[c,k]."""
    soft = np.asarray(soft)
    if soft.ndim != 3:
        raise ShapeError(f"soft encoding must be (N, C, K), got {soft.shape}")
    if table.ndim != 3 or table.shape[:2] != soft.shape[1:]:
        raise ShapeError(f"table {table.shape} inconsistent with soft encoding {soft.shape}")
    out = np.einsum(
        "nck,ckm->nm", soft.astype(np.float64), table.astype(np.float64)
    )
    return out.astype(F32)


@dataclass
class LutLayer:
    """One PQ-replaced linear layer.

    Holds the codebooks, the retained weight matrix (D, M) used to rebuild
    the table after centroid/weight updates, the f32 lookup table (plus its
    quantized twin when QAT is active), the learned log-temperature, and an
    optional bias applied after aggregation. A layer loaded from a
    container for inference has ``weight=None`` and cannot be rebuilt.
    """

    cfg: PqConfig
    books: np.ndarray
    weight: np.ndarray | None
    bias: np.ndarray
    temp: Temperature = field(default_factory=Temperature)
    qat: bool = False
    replace_active: bool = True
    table: np.ndarray | None = None
    qtable: LookupTableI8 | None = None
    trees: list | None = None

    def __post_init__(self) -> None:
        self.books = validate_codebooks(self.books)
        c, k, v = self.books.shape
        if (k, v) != (self.cfg.k, self.cfg.v):
            raise ShapeError(f"codebooks {self.books.shape} inconsistent with config {self.cfg}")
        if self.weight is not None:
            self.weight = as_matrix(self.weight, "weight")
            if self.weight.shape[0] != c * v:
                raise ShapeError(f"weight rows {self.weight.shape[0]} != C*V = {c * v}")
        self.bias = np.ascontiguousarray(self.bias, dtype=F32)
        if self.table is None:
            self.rebuild()

    @property
    def d(self) -> int:
        return self.books.shape[0] * self.cfg.v

    @property
    def m(self) -> int:
        return self.table.shape[2]

    def rebuild(self) -> None:
        """Recompute the lookup table from (weight, books); refresh the quantized twin."""
        if self.weight is None:
            if self.table is None:
                raise ConfigError("layer has neither a weight matrix nor a table")
            return
        self.table = build_table(self.weight, self.books)
        self.qtable = quantize_table(self.table) if self.qat else None

    def forward_table(self) -> np.ndarray:
        """Table the forward pass reads: dequantized under QAT, raw f32 otherwise."""
        if self.qat:
            if self.qtable is None:
                self.qtable = quantize_table(self.table)
            return dequantize(self.qtable)
        return self.table

    @classmethod
    def from_dense(
        cls,
        weight: np.ndarray,
        bias: np.ndarray,
        cfg: PqConfig,
        sample_inputs: np.ndarray,
        rng: np.random.Generator,
        max_iters: int = 25,
        qat: bool = False,
    ) -> "LutLayer":
        """Build a layer from a dense weight matrix and collected inputs.

        One k-means run per codebook over the matching sub-vector slice of
        the samples; temperature starts at t = 1 (theta = 0).
        """
        weight = as_matrix(weight, "weight")
        sample_inputs = as_matrix(sample_inputs, "sample_inputs")
        if sample_inputs.shape[1] != weight.shape[0]:
            raise ShapeError(
                f"sample cols {sample_inputs.shape[1]} != weight rows {weight.shape[0]}"
            )
        if sample_inputs.shape[0] < cfg.k:
            raise ConfigError(
                f"need at least K={cfg.k} samples per codebook, got {sample_inputs.shape[0]}"
            )
        blocks = split_subvectors(sample_inputs, cfg.v)
        books = np.stack(
            [kmeans_fit(block, cfg.k, max_iters=max_iters, rng=rng) for block in blocks]
        )
        return cls(cfg=cfg, books=books, weight=weight, bias=bias, qat=qat)


@dataclass
class SteCache:
    """Forward-pass values needed by :func:`ste_backward`."""

    a: np.ndarray          # (N, D) f32 input
    distances: np.ndarray  # (N, C, K) f64 squared distances
    soft: np.ndarray       # (N, C, K) f64 softmax encoding at the forward t
    hard: np.ndarray       # (N, C) u8 argmin encoding
    t: float


def ste_forward(a: np.ndarray, layer: LutLayer) -> tuple[np.ndarray, SteCache]:
    """Hard-path forward: aggregate table rows at the argmin encodings.

    The output is exactly the vanilla PQ result (quantized-table variant
    when QAT is on) and does not depend on the temperature; the cached
    distances and soft encoding only feed the backward pass.
    """
    a = as_matrix(a, "a")
    d = subvector_distances(a, layer.books)
    hard = np.argmin(d, axis=2).astype(np.uint8)
    t = layer.temp.t
    soft = _stable_softmax(-d / t)
    out = lut_matmul_ref(hard, layer.forward_table())
    if layer.bias.size:
        out = out + layer.bias
    return out, SteCache(a=a, distances=d, soft=soft, hard=hard, t=t)


def ste_backward(grad_out: np.ndarray, cache: SteCache, layer: LutLayer) -> dict:
    """Gradients of the soft surrogate sum(grad_out * y_soft).

    y_soft[n, m] = sum_c sum_k soft[n, c, k] * (P[c] @ W_c)[k, m], with
    soft = softmax(-d/t) and t = exp(theta). Centroid gradients combine the
    encoding-distance path and the table path; the quantizer is
    straight-through, so QAT does not change the backward arithmetic.

    Returns {"dP": (C,K,V) f32, "dW": (D,M) f32, "dA": (N,D) f32,
    "dtheta": float, "db": (M,) f32}.
    """
    if layer.weight is None:
        raise ConfigError("cannot backpropagate through an inference-only layer")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n, d_in = cache.a.shape
    c_books, k, v = layer.books.shape
    if grad_out.shape != (n, layer.weight.shape[1]):
        raise ShapeError(f"grad_out {grad_out.shape} inconsistent with cache/layer")
    if cache.distances.shape != (n, c_books, k):
        raise ShapeError("cache does not match this layer")

    a64 = cache.a.astype(np.float64)
    p64 = layer.books.astype(np.float64)
    w64 = layer.weight.astype(np.float64)
    t = cache.t

    dP = np.empty((c_books, k, v), dtype=np.float64)
    dW = np.empty_like(w64)
    dA = np.empty((n, d_in), dtype=np.float64)
    dtheta = 0.0

    for c in range(c_books):
        sl = slice(c * v, (c + 1) * v)
        a_c = a64[:, sl]                      # (N, V)
        w_c = w64[sl]                         # (V, M)
        p_c = p64[c]                          # (K, V)
        s = cache.soft[:, c, :]               # (N, K)

        table_c = p_c @ w_c                   # (K, M) real-valued table
        dT = s.T @ grad_out                   # (K, M)
        dW[sl] = p_c.T @ dT                   # (V, M)

        # Softmax backward: logits z = -d / t.
        u = grad_out @ table_c.T              # (N, K) dL/dsoft
        dz = s * (u - np.sum(s * u, axis=1, keepdims=True))
        dd = -dz / t                          # (N, K) dL/ddistances

        sum_dd = dd.sum(axis=0)               # (K,)
        dP[c] = -2.0 * (dd.T @ a_c - sum_dd[:, None] * p_c) + dT @ w_c.T
        dA[:, sl] = 2.0 * (dd.sum(axis=1, keepdims=True) * a_c - dd @ p_c)
        dtheta += float(np.sum(dz * cache.distances[:, c, :]))

    dtheta /= t  # chain through z = -d/t and t = exp(theta)
    return {
        "dP": dP.astype(F32),
        "dW": dW.astype(F32),
        "dA": dA.astype(F32),
        "dtheta": dtheta,
        "db": grad_out.sum(axis=0).astype(F32),
    }


@dataclass(frozen=True)
class TemperatureSchedule:
    """How the per-layer temperature evolves during training.

    ``learned``  - theta follows its gradient (plain SGD, own learning rate)
    ``fixed``    - t pinned to ``t0`` for the whole run
    ``annealed`` - geometric interpolation from t0 towards t1:
                   t(e) = t0 * (t1/t0)^(e/E) for 0-based epoch e of E
    """

    mode: str = "learned"
    t0: float = 1.0
    t1: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("learned", "fixed", "annealed"):
            raise ConfigError(f"unknown temperature mode {self.mode!r}")
        if not (self.t0 > 0.0 and self.t1 > 0.0):
            raise ConfigError("temperatures must be positive")

    @classmethod
    def parse(cls, text: str) -> "TemperatureSchedule":
        """Parse 'learned', 'fixed:T' or 'annealed:T0:T1'."""
        parts = text.split(":")
        if parts[0] == "learned" and len(parts) == 1:
            return cls("learned")
        try:
            if parts[0] == "fixed" and len(parts) == 2:
                return cls("fixed", t0=float(parts[1]))
            if parts[0] == "annealed" and len(parts) == 3:
                return cls("annealed", t0=float(parts[1]), t1=float(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"bad temperature spec {text!r}") from exc
        raise ConfigError(f"bad temperature spec {text!r}")

    @property
    def learned(self) -> bool:
        return self.mode == "learned"

    def value_for_epoch(self, epoch: int, total_epochs: int) -> float:
        """Scheduled t for a 0-based epoch; only meaningful for fixed/annealed."""
        if self.mode == "fixed":
            return self.t0
        if self.mode == "annealed":
            frac = epoch / total_epochs if total_epochs > 0 else 0.0
            return float(self.t0 * (self.t1 / self.t0) ** frac)
        raise ConfigError("learned temperature has no schedule value")

    def describe(self) -> str:
        if self.mode == "learned":
            return "learned"
        if self.mode == "fixed":
            return f"fixed:{self.t0:g}"
        return f"annealed:{self.t0:g}:{self.t1:g}"
