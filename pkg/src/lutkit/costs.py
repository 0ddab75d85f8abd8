"""Analytical FLOPs and storage calculators.

For an (N, D) x (D, M) product replaced by a K-centroid, length-V
sub-vector AMM:

    flops_lut   = N*D*K + N*M*D/V          (encode + lookup/aggregate MACs)
    flops_dense = N*D*M
    table bytes = D*M*K/V                  (8-bit entries)
    dense bytes = 4*D*M                    (f32 weights)

Centroid storage (4*D*K bytes) and hash-tree storage are reported as
separate line items; the size reduction ratio counts tables plus
centroids. Hash encoding cost is reported in comparisons (N * D/V * L),
not FLOPs, since tree traversal is multiplication-free. The operation
intensity of the distance kernel is 2 / (1/K + 1/V) FLOP per byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import ConfigError
from .kernels import flop_counter


@dataclass(frozen=True)
class CostReport:
    n: int
    d: int
    m: int
    k: int
    v: int
    table_bits: int
    flops_encode: int
    flops_lookup: int
    flops_lut: int
    flops_dense: int
    size_lut_bytes: int
    size_dense_bytes: int
    centroid_bytes: int
    tree_bytes: int
    hash_comparisons: int
    flops_reduction: float
    size_reduction: float
    op_intensity: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def cost(
    n: int,
    d: int,
    m: int,
    k: int,
    v: int,
    table_bits: int = 8,
    hash_levels: int = 0,
) -> CostReport:
    """Cost of one replaced matmul; ``table_bits`` selects 8- or 32-bit tables."""
    if table_bits not in (8, 32):
        raise ConfigError(f"table_bits must be 8 or 32, got {table_bits}")
    if hash_levels < 0:
        raise ConfigError("hash_levels must be >= 0")
    flops = flop_counter(n, d, m, k, v)
    c_books = d // v
    size_lut = d * m * k // v * (table_bits // 8)
    size_dense = 4 * d * m
    centroid_bytes = 4 * d * k
    # Serialized tree: 8-byte dims + 4-byte thresholds + 1-byte leaves.
    tree_bytes = (
        c_books * (8 * hash_levels + 4 * (2**hash_levels - 1) + 2**hash_levels)
        if hash_levels
        else 0
    )
    flops_lut = flops["encode"] + flops["lookup_aggregate"]
    return CostReport(
        n=n,
        d=d,
        m=m,
        k=k,
        v=v,
        table_bits=table_bits,
        flops_encode=flops["encode"],
        flops_lookup=flops["lookup_aggregate"],
        flops_lut=flops_lut,
        flops_dense=flops["dense"],
        size_lut_bytes=size_lut,
        size_dense_bytes=size_dense,
        centroid_bytes=centroid_bytes,
        tree_bytes=tree_bytes,
        hash_comparisons=n * c_books * hash_levels,
        flops_reduction=flops["dense"] / flops_lut,
        size_reduction=size_dense / (size_lut + centroid_bytes),
        op_intensity=2.0 / (1.0 / k + 1.0 / v),
    )


@dataclass(frozen=True)
class ModelCostReport:
    layers: tuple[dict, ...]
    flops_lut: int
    flops_dense: int
    size_lut_bytes: int
    size_dense_bytes: int
    flops_reduction: float
    size_reduction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def model_cost(layer_shapes: list[dict]) -> ModelCostReport:
    """Aggregate cost over a model's linear layers.

    Each entry describes one layer: {"name", "n", "d", "m"} plus, for
    replaced layers, {"k", "v", "table_bits"}. Non-replaced layers are
    costed as dense on both sides of the comparison.
    """
    per_layer = []
    tot_lut = tot_dense = 0
    tot_lut_bytes = tot_dense_bytes = 0
    for spec in layer_shapes:
        n, d, m = spec["n"], spec["d"], spec["m"]
        dense_flops = n * d * m
        dense_bytes = 4 * d * m
        if spec.get("k"):
            rep = cost(n, d, m, spec["k"], spec["v"], spec.get("table_bits", 8))
            lut_flops = rep.flops_lut
            lut_bytes = rep.size_lut_bytes + rep.centroid_bytes
            detail = asdict(rep)
        else:
            lut_flops = dense_flops
            lut_bytes = dense_bytes
            detail = {
                "n": n,
                "d": d,
                "m": m,
                "flops_lut": lut_flops,
                "flops_dense": dense_flops,
                "size_lut_bytes": lut_bytes,
                "size_dense_bytes": dense_bytes,
            }
        detail["name"] = spec.get("name", f"layer{len(per_layer)}")
        detail["replaced"] = bool(spec.get("k"))
        per_layer.append(detail)
        tot_lut += lut_flops
        tot_dense += dense_flops
        tot_lut_bytes += lut_bytes
        tot_dense_bytes += dense_bytes
    return ModelCostReport(
        layers=tuple(per_layer),
        flops_lut=tot_lut,
        flops_dense=tot_dense,
        size_lut_bytes=tot_lut_bytes,
        size_dense_bytes=tot_dense_bytes,
        flops_reduction=tot_dense / tot_lut if tot_lut else 1.0,
        size_reduction=tot_dense_bytes / tot_lut_bytes if tot_lut_bytes else 1.0,
    )
