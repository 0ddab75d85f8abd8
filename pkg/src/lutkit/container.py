"""Model container: the on-disk deployment format.

Little-endian throughout. Layout:

    magic 'LUTN' | u32 version=1 | u32 record_count | records...

Each record starts with three bytes: kind (1=dense, 2=lut), activation
applied after the layer (0=none, 1=relu), and geometry (0=flat, 1=conv;
conv adds u32 kernel, stride, pad). Payloads:

    dense: u32 D, M | f32 W[D*M] row-major | f32 b[M]
    lut:   u32 D, M, K, V | f32 temperature | f32 centroids[C*K*V] |
           u8 table_tag (1 = f32 table[C*K*M], 2 = i8 q[C*K*M] + f32 scale) |
           u8 tree_count, then per codebook: u32 L | u32 dims[L] |
           f32 thresholds[2^L - 1] | u8 leaves[2^L]

LUT records are inference artifacts: they carry no weight matrix and no
separate bias. When a trained layer is written, its bias is folded into
the table as bias/C per codebook entry, which aggregates back to exactly
one bias addition per output; a loaded LUT layer therefore has a zero bias
and cannot rebuild its table. Unknown kinds or tags are rejected as a
version error, and round trips are byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError
from .model import Conv, Dense, LutConv, LutDense, Model, Relu
from .pq import PqConfig
from .quant import LookupTableI8, quantize_table
from .softpq import LutLayer, Temperature
from .hashing import HashTree
from .tensor import F32

MAGIC = b"LUTN"
VERSION = 1

_KIND_DENSE = 1
_KIND_LUT = 2
_TABLE_F32 = 1
_TABLE_I8 = 2


def save_model(path: str | Path, model: Model) -> None:
    Path(path).write_bytes(model_bytes(model))


def model_bytes(model: Model) -> bytes:
    records = _records_with_activations(model)
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for layer, activation in records:
        out.append(_encode_record(layer, activation))
    return b"".join(out)


def _records_with_activations(model: Model) -> list[tuple[object, int]]:
    records = []
    layers = model.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Relu):
            raise ContainerError("model starts with or has consecutive activations")
        activation = 1 if i + 1 < len(layers) and isinstance(layers[i + 1], Relu) else 0
        records.append((layer, activation))
        i += 2 if activation else 1
    return records


def _encode_record(layer, activation: int) -> bytes:
    is_conv = isinstance(layer, Conv)  # covers LutConv
    is_lut = isinstance(layer, (LutDense, LutConv))
    head = struct.pack(
        "<BBB", _KIND_LUT if is_lut else _KIND_DENSE, activation, 1 if is_conv else 0
    )
    parts = [head]
    if is_conv:
        parts.append(struct.pack("<III", layer.kernel, layer.stride, layer.pad))
    if is_lut:
        parts.append(_encode_lut(layer.lut))
    else:
        w = np.ascontiguousarray(layer.weight, dtype="<f4")
        b = np.ascontiguousarray(layer.bias, dtype="<f4")
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
        parts.append(w.tobytes())
        parts.append(b.tobytes())
    return b"".join(parts)


def _encode_lut(lut: LutLayer) -> bytes:
    c, k, v = lut.books.shape
    d, m = c * v, lut.table.shape[2]
    parts = [struct.pack("<IIIIf", d, m, k, v, lut.temp.t)]
    parts.append(np.ascontiguousarray(lut.books, dtype="<f4").tobytes())

    table = lut.table
    has_bias = bool(lut.bias.size) and bool(np.any(lut.bias))
    if has_bias:
        table = table + (lut.bias / np.float32(c)).astype(F32)[None, None, :]
    if lut.qat or lut.qtable is not None:
        if lut.qtable is not None and not has_bias:
            qt = lut.qtable  # verbatim payload keeps round trips byte-identical
        else:
            qt = quantize_table(table)
        parts.append(struct.pack("<B", _TABLE_I8))
        parts.append(np.ascontiguousarray(qt.q, dtype="|i1").tobytes())
        parts.append(struct.pack("<f", float(qt.scale)))
    else:
        parts.append(struct.pack("<B", _TABLE_F32))
        parts.append(np.ascontiguousarray(table, dtype="<f4").tobytes())

    trees = lut.trees or []
    parts.append(struct.pack("<B", len(trees)))
    for tree in trees:
        parts.append(struct.pack("<I", tree.levels))
        parts.append(np.ascontiguousarray(tree.dims, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(tree.thresholds, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(tree.leaves, dtype="|u1").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ContainerError("container truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int, shape) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).reshape(shape).copy()


def load_model(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(raw: bytes) -> Model:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic: not a LUTN model container")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    layers: list = []
    for _ in range(count):
        kind, activation, geom = r.unpack("<BBB")
        if kind not in (_KIND_DENSE, _KIND_LUT):
            raise ContainerError(f"unknown record kind {kind} (version error)")
        if geom not in (0, 1):
            raise ContainerError(f"unknown geometry tag {geom} (version error)")
        conv_params = r.unpack("<III") if geom == 1 else None
        if kind == _KIND_DENSE:
            d, m = r.unpack("<II")
            weight = r.array("<f4", d * m, (d, m))
            bias = r.array("<f4", m, (m,))
            layer = _make_dense(conv_params, weight, bias)
        else:
            layer = _decode_lut(r, conv_params)
        layers.append(layer)
        if activation == 1:
            layers.append(Relu())
        elif activation != 0:
            raise ContainerError(f"unknown activation tag {activation} (version error)")
    if r.pos != len(raw):
        raise ContainerError(f"{len(raw) - r.pos} trailing bytes after last record")
    return Model(layers)


def _make_dense(conv_params, weight, bias):
    if conv_params is None:
        layer = Dense(weight.shape[0], weight.shape[1])
        layer.weight = np.ascontiguousarray(weight, dtype=F32)
        layer.bias = np.ascontiguousarray(bias, dtype=F32)
        return layer
    kernel, stride, pad = conv_params
    in_channels = weight.shape[0] // (kernel * kernel)
    layer = Conv(in_channels, weight.shape[1], kernel=kernel, stride=stride, pad=pad)
    layer.weight = np.ascontiguousarray(weight, dtype=F32)
    layer.bias = np.ascontiguousarray(bias, dtype=F32)
    return layer


def _decode_lut(r: _Reader, conv_params):
    d, m, k, v, temperature = r.unpack("<IIIIf")
    if v == 0 or d % v:
        raise ContainerError(f"corrupt LUT record: D={d} not divisible by V={v}")
    c = d // v
    books = r.array("<f4", c * k * v, (c, k, v))
    (table_tag,) = r.unpack("<B")
    qtable = None
    if table_tag == _TABLE_F32:
        table = r.array("<f4", c * k * m, (c, k, m))
    elif table_tag == _TABLE_I8:
        q = r.array("|i1", c * k * m, (c, k, m))
        (scale,) = r.unpack("<f")
        qtable = LookupTableI8(q=q, scale=np.float32(scale))
        table = q.astype(F32) * np.float32(scale)
    else:
        raise ContainerError(f"unknown table tag {table_tag} (version error)")
    (tree_count,) = r.unpack("<B")
    trees = None
    if tree_count:
        trees = []
        for _ in range(tree_count):
            (levels,) = r.unpack("<I")
            dims = r.array("<u4", levels, (levels,)).astype(np.int64)
            thresholds = r.array("<f4", 2**levels - 1, (2**levels - 1,))
            leaves = r.array("|u1", 2**levels, (2**levels,))
            trees.append(HashTree(dims=dims, thresholds=thresholds, leaves=leaves))

    temp = Temperature()
    temp.set_t(float(temperature))
    lut = LutLayer(
        cfg=PqConfig(v=v, k=k),
        books=books,
        weight=None,
        bias=np.zeros(m, dtype=F32),
        temp=temp,
        qat=qtable is not None,
        table=table,
        qtable=qtable,
        trees=trees,
    )
    if conv_params is None:
        return LutDense(lut)
    kernel, stride, pad = conv_params
    in_channels = d // (kernel * kernel)
    return LutConv(in_channels, kernel, stride, pad, lut)
