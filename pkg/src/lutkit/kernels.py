"""Optimized inference kernels and the micro-benchmark harness.

Two kernels, contracted to be observation-equivalent to the references in
:mod:`lutkit.pq`:

* ``centroid_search_fast`` - fused distance computation and argmin. The
  loop nest is centroid-stationary (each K x V codebook block stays
  resident while input row tiles stream past), distances drop the
  per-row-constant ||a||^2 term and use ||p||^2 - 2 a.p, and the argmin is
  a chunked min-reduction merged with strict less-than so ties resolve to
  the lowest index exactly like the reference.

* ``lut_gather_accumulate`` - INT8 table gather with mixed-precision
  accumulation: INT16 partial sums over groups of at most ``group_size``
  codebooks, widened into an INT32 accumulator. With |entry| <= 127 a
  group of 258 entries reaches at most 32766, so partials can never wrap;
  the result is bit-exact integer arithmetic, scaled to f32 at the end.

Both run single-threaded; batching across rows is the caller's concern.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError, ShapeError
from .pq import lut_matmul_ref, validate_codebooks
from .quant import QMAX, LookupTableI8, quantize_table
from .tensor import F32, as_matrix, matmul_ref

INT16_MAX = 32767
MAX_GROUP = INT16_MAX // QMAX  # 258
assert MAX_GROUP * QMAX <= INT16_MAX  # static no-overflow proof: 258 * 127 = 32766


@dataclass(frozen=True)
class KernelPlan:
    """Blocking parameters: row tile, centroid chunk, INT16 group size.

    Defaults are tuned empirically for this backend and are repo choices,
    not contract values. ``group_size`` defaults to half the provable
    overflow bound for headroom. ``lane_hint`` is advisory only.
    """

    n_block: int = 64
    k_block: int = 8
    group_size: int = 128
    lane_hint: int = 16

    def __post_init__(self) -> None:
        if self.n_block < 1 or self.k_block < 1:
            raise ConfigError("block sizes must be >= 1")
        if not 1 <= self.group_size <= MAX_GROUP:
            raise ConfigError(
                f"group_size must be in [1, {MAX_GROUP}] to keep INT16 partials exact"
            )


def centroid_search_fast(
    a: np.ndarray, books: np.ndarray, plan: KernelPlan = KernelPlan()
) -> np.ndarray:
    """Fused nearest-centroid search; indices identical to ``encode_hard``."""
    a = as_matrix(a, "a")
    books = validate_codebooks(books)
    c_books, k, v = books.shape
    if a.shape[1] != c_books * v:
        raise ShapeError(f"input cols {a.shape[1]} != C*V = {c_books}*{v}")
    n = a.shape[0]
    a64 = a.astype(np.float64)
    books64 = books.astype(np.float64)
    p_norm = np.einsum("ckv,ckv->ck", books64, books64)

    k_block = min(plan.k_block, k)
    out = np.empty((n, c_books), dtype=np.uint8)
    for c in range(c_books):
        block_p = books64[c]          # K x V block, resident across row tiles
        block_n = p_norm[c]
        a_c = a64[:, c * v : (c + 1) * v]
        for n0 in range(0, n, plan.n_block):
            rows = a_c[n0 : n0 + plan.n_block]
            # ||a||^2 is constant per row and cannot change the argmin.
            dist = block_n[None, :] - 2.0 * (rows @ block_p.T)
            out[n0 : n0 + plan.n_block, c] = _chunked_argmin(dist, k_block)
    return out


def _chunked_argmin(dist: np.ndarray, k_block: int) -> np.ndarray:
    """Argmin over axis 1 as a chunked min-reduction; ties to the lowest index."""
    rows = np.arange(dist.shape[0])
    best_idx = dist[:, :k_block].argmin(axis=1)
    best_val = dist[rows, best_idx]
    for k0 in range(k_block, dist.shape[1], k_block):
        chunk = dist[:, k0 : k0 + k_block]
        idx = chunk.argmin(axis=1)
        val = chunk[rows, idx]
        better = val < best_val  # strict: earlier chunks keep exact ties
        best_idx = np.where(better, idx + k0, best_idx)
        best_val = np.where(better, val, best_val)
    return best_idx


def lut_gather_i32(
    enc: np.ndarray, q: np.ndarray, plan: KernelPlan = KernelPlan()
) -> np.ndarray:
    """Integer core of the lookup kernel: exact INT32 sums of INT8 entries."""
    enc = np.ascontiguousarray(enc)
    if enc.ndim != 2:
        raise ShapeError(f"encoding must be (N, C), got {enc.shape}")
    if q.ndim != 3 or q.dtype != np.int8:
        raise ShapeError(f"table must be int8 (C, K, M), got {q.dtype} {q.shape}")
    c_books, k, m = q.shape
    if enc.shape[1] != c_books:
        raise ShapeError(f"encoding C={enc.shape[1]} != table C={c_books}")
    if enc.size and int(enc.max()) >= k:
        raise CorruptionError(f"encoding index {int(enc.max())} >= K={k}")
    n = enc.shape[0]
    out = np.zeros((n, m), dtype=np.int32)
    partial = np.empty((n, m), dtype=np.int16)
    for g0 in range(0, c_books, plan.group_size):
        partial[:] = 0
        for c in range(g0, min(g0 + plan.group_size, c_books)):
            np.add(partial, q[c][enc[:, c]], out=partial)
        out += partial
    return out


def lut_gather_accumulate(
    enc: np.ndarray, table: LookupTableI8, plan: KernelPlan = KernelPlan()
) -> np.ndarray:
    """Quantized lookup/accumulate: f32 output = scale * exact INT32 sums."""
    out32 = lut_gather_i32(enc, table.q, plan)
    return out32.astype(F32) * np.float32(table.scale)


def lut_gather_f32(enc: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Float lookup path; same ascending-c f32 accumulation as the reference."""
    return lut_matmul_ref(enc, table)


def lut_layer_infer(
    a: np.ndarray,
    layer,
    plan: KernelPlan = KernelPlan(),
    integer: bool | None = None,
    encoder: str = "dist",
) -> np.ndarray:
    """Full layer inference: fused search (or hash traversal), then lookup.

    ``integer=None`` picks the quantized path whenever the layer carries a
    quantized table. Swapping ``encoder`` between 'dist' and 'hash' only
    changes where the index matrix comes from; the lookup machinery is the
    same either way.
    """
    from .hashing import encode_hash  # local import to avoid a cycle

    if encoder == "dist":
        enc = centroid_search_fast(a, layer.books, plan)
    elif encoder == "hash":
        if not layer.trees:
            raise ConfigError("layer has no hash trees; train with hashing enabled")
        enc = encode_hash(a, layer.trees)
    else:
        raise ConfigError(f"unknown encoder {encoder!r}")

    if integer is None:
        integer = layer.qtable is not None
    if integer:
        if layer.qtable is None:
            raise ConfigError("integer path requested but the layer has no quantized table")
        out = lut_gather_accumulate(enc, layer.qtable, plan)
    else:
        out = lut_gather_f32(enc, layer.table)
    if layer.bias.size:
        out = out + layer.bias
    return out


def flop_counter(n: int, d: int, m: int, k: int, v: int) -> dict[str, int]:
    """Analytic multiply-add counts for one AMM versus the dense product.

    encode = N*D*K (distance computation), lookup_aggregate = N*M*D/V
    (one accumulation per looked-up entry), dense = N*D*M.
    """
    if v < 1 or d % v != 0:
        raise ConfigError(f"D={d} not divisible by V={v}")
    return {
        "encode": n * d * k,
        "lookup_aggregate": n * m * (d // v),
        "dense": n * d * m,
    }


def instrumented_mac_counts(
    n: int, d: int, m: int, k: int, v: int, rng: np.random.Generator
) -> dict[str, int]:
    """Run a literal loop implementation of the AMM and count its MACs.

    Every multiply-add executed by the scalar reference increments a
    counter; the totals must equal :func:`flop_counter` exactly. Intended
    for small shapes only.
    """
    if v < 1 or d % v != 0:
        raise ConfigError(f"D={d} not divisible by V={v}")
    c_books = d // v
    a = rng.standard_normal((n, d))
    books = rng.standard_normal((c_books, k, v))
    b = rng.standard_normal((d, m))

    encode_macs = 0
    table = np.zeros((c_books, k, m))
    for c in range(c_books):
        for kk in range(k):
            for mm in range(m):
                acc = 0.0
                for j in range(v):
                    acc += books[c, kk, j] * b[c * v + j, mm]
                table[c, kk, mm] = acc
    # Table construction is offline and not part of the inference count.

    enc = np.empty((n, c_books), dtype=np.int64)
    for i in range(n):
        for c in range(c_books):
            best_k, best_d = 0, np.inf
            for kk in range(k):
                acc = 0.0
                for j in range(v):
                    diff = a[i, c * v + j] - books[c, kk, j]
                    acc += diff * diff
                    encode_macs += 1
                if acc < best_d:
                    best_k, best_d = kk, acc
            enc[i, c] = best_k

    aggregate_macs = 0
    out = np.zeros((n, m))
    for i in range(n):
        for mm in range(m):
            for c in range(c_books):
                out[i, mm] += table[c, enc[i, c], mm]
                aggregate_macs += 1

    dense_macs = n * d * m  # one MAC per (i, k, j) triple of the dense product
    return {"encode": encode_macs, "lookup_aggregate": aggregate_macs, "dense": dense_macs}


@dataclass
class BenchReport:
    """Single-threaded timing of the LUT pipeline against ``matmul_ref``."""

    n: int
    d: int
    m: int
    k: int
    v: int
    plan: KernelPlan
    repetitions: int
    lut_min_ns: int
    lut_median_ns: int
    dense_min_ns: int
    dense_median_ns: int

    @property
    def gflops_equiv(self) -> float:
        """Dense-equivalent MAC throughput of the LUT path, in G MAC/s."""
        return (self.n * self.d * self.m) / self.lut_median_ns

    @property
    def speedup_vs_dense(self) -> float:
        return self.dense_median_ns / self.lut_median_ns

    CSV_HEADER = (
        "n,d,m,k,v,n_block,k_block,group_size,"
        "min_ns,median_ns,gflops_equiv,speedup_vs_dense"
    )

    def csv_row(self) -> str:
        return (
            f"{self.n},{self.d},{self.m},{self.k},{self.v},"
            f"{self.plan.n_block},{self.plan.k_block},{self.plan.group_size},"
            f"{self.lut_min_ns},{self.lut_median_ns},"
            f"{self.gflops_equiv:.6f},{self.speedup_vs_dense:.4f}"
        )


def bench_kernel(
    shape: tuple[int, int, int, int, int],
    plan: KernelPlan = KernelPlan(),
    repetitions: int = 9,
    rng: np.random.Generator | None = None,
    warmup: int = 2,
) -> BenchReport:
    """Time the quantized LUT pipeline and the dense reference on one shape.

    ``shape`` is (N, D, M, K, V). Random operands; warm-up runs excluded;
    reports min and median wall time over ``repetitions`` runs of each
    path.
    """
    n, d, m, k, v = shape
    if repetitions < 5:
        raise ConfigError(f"need at least 5 repetitions, got {repetitions}")
    if d % v != 0:
        raise ConfigError(f"D={d} not divisible by V={v}")
    if rng is None:
        rng = np.random.default_rng(0)
    c_books = d // v
    a = rng.standard_normal((n, d)).astype(F32)
    books = rng.standard_normal((c_books, k, v)).astype(F32)
    b = rng.standard_normal((d, m)).astype(F32)

    from .pq import build_table  # deferred: keeps module import light

    qtable = quantize_table(build_table(b, books))

    def lut_path() -> np.ndarray:
        enc = centroid_search_fast(a, books, plan)
        return lut_gather_accumulate(enc, qtable, plan)

    def dense_path() -> np.ndarray:
        return matmul_ref(a, b)

    lut_times = _time_path(lut_path, repetitions, warmup)
    dense_times = _time_path(dense_path, repetitions, warmup)
    return BenchReport(
        n=n,
        d=d,
        m=m,
        k=k,
        v=v,
        plan=plan,
        repetitions=repetitions,
        lut_min_ns=int(np.min(lut_times)),
        lut_median_ns=int(np.median(lut_times)),
        dense_min_ns=int(np.min(dense_times)),
        dense_median_ns=int(np.median(dense_times)),
    )


def _time_path(fn, repetitions: int, warmup: int) -> list[int]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return times
