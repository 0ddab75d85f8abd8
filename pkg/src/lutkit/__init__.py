"""LUT-based approximate-matmul inference kit.

Learns per-layer centroid codebooks (k-means init, then differentiable
fine-tuning with a hard-forward / soft-backward encoder), precomputes
centroid-times-weight lookup tables (optionally INT8-quantized), and runs
inference through two kernels: fused closest-centroid search and table
gather/accumulate.
"""

import os as _os

# The kernels and the benchmark methodology are single-threaded by contract.
# Cap BLAS pools before numpy initializes them; explicit user settings win.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .errors import (
    ConfigError,
    ContainerError,
    CorruptionError,
    DataError,
    DivergenceError,
    LutKitError,
    ShapeError,
)
from .rng import make_rng
from .tensor import im2col, matmul_ref, split_subvectors
from .pq import (
    PqConfig,
    build_table,
    encode_hard,
    kmeans_fit,
    lut_matmul_ref,
    mse,
    pq_amm,
)
from .quant import LookupTableI8, dequantize, quantize_table
from .softpq import (
    LutLayer,
    Temperature,
    TemperatureSchedule,
    encode_soft,
    soft_aggregate,
    ste_backward,
    ste_forward,
)
from .hashing import HashTree, build_hash_tree, encode_hash, hash_agreement
from .kernels import (
    BenchReport,
    KernelPlan,
    bench_kernel,
    centroid_search_fast,
    flop_counter,
    lut_gather_accumulate,
    lut_layer_infer,
)
from .costs import CostReport, cost, model_cost

__version__ = "0.1.0"
