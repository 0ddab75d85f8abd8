"""Small-model stack: dense/conv layers, their LUT-replaced twins, templates.

Convolutions are lowered to matrix multiplication with im2col, so a conv
layer is the same (rows x D) @ (D x M) core as a dense layer, wrapped in
patch extraction and output reshaping. Replacing a layer swaps that core
for a codebook/lookup-table pair and leaves everything around it intact.

The first linear layer is never replaced by default; replacement starts
from the back of the network.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .pq import PqConfig
from .rng import child_rng
from .softpq import LutLayer, ste_backward, ste_forward
from .tensor import F32, col2im, im2col


class Relu:
    trainable = False

    def forward(self, x: np.ndarray, train: bool = False):
        out = np.maximum(x, 0.0)
        return out, (x if train else None)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        return grad * (cache > 0)


class Dense:
    """y = x @ W + b; 4-D inputs are flattened row-major first."""

    trainable = True

    def __init__(self, d: int, m: int, rng: np.random.Generator | None = None):
        if rng is None:
            self.weight = np.zeros((d, m), dtype=F32)
        else:
            self.weight = (rng.standard_normal((d, m)) * math.sqrt(2.0 / d)).astype(F32)
        self.bias = np.zeros(m, dtype=F32)
        self.grads: dict[str, np.ndarray] = {}

    def core_shape(self) -> tuple[int, int]:
        return self.weight.shape

    def forward(self, x: np.ndarray, train: bool = False):
        orig_shape = x.shape
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"dense layer got {x.shape[1]} features, expected {self.weight.shape[0]}")
        out = x @ self.weight + self.bias
        return out, ((x, orig_shape) if train else None)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        x, orig_shape = cache
        self.grads = {
            "weight": (x.T @ grad).astype(F32),
            "bias": grad.sum(axis=0).astype(F32),
        }
        dx = grad @ self.weight.T
        return dx.reshape(orig_shape)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Conv:
    """3x3-style convolution lowered via im2col; weight is (Cin*kh*kw, Cout)."""

    trainable = True

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        pad: int = 1,
        rng: np.random.Generator | None = None,
    ):
        self.in_channels = in_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        if rng is None:
            self.weight = np.zeros((fan_in, out_channels), dtype=F32)
        else:
            self.weight = (rng.standard_normal((fan_in, out_channels)) * math.sqrt(2.0 / fan_in)).astype(F32)
        self.bias = np.zeros(out_channels, dtype=F32)
        self.grads: dict[str, np.ndarray] = {}

    def core_shape(self) -> tuple[int, int]:
        return self.weight.shape

    def _lower(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expected NCHW with {self.in_channels} channels, got {x.shape}")
        cols = im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        h_out = (x.shape[2] + 2 * self.pad - self.kernel) // self.stride + 1
        w_out = (x.shape[3] + 2 * self.pad - self.kernel) // self.stride + 1
        return cols, h_out, w_out

    def _raise(self, y: np.ndarray, n: int, h_out: int, w_out: int) -> np.ndarray:
        return y.reshape(n, h_out, w_out, -1).transpose(0, 3, 1, 2)

    def forward(self, x: np.ndarray, train: bool = False):
        cols, h_out, w_out = self._lower(x)
        y = cols @ self.weight + self.bias
        out = self._raise(y, x.shape[0], h_out, w_out)
        return out, ((cols, x.shape, h_out, w_out) if train else None)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        cols, in_shape, h_out, w_out = cache
        g = grad.transpose(0, 2, 3, 1).reshape(-1, grad.shape[1])
        self.grads = {
            "weight": (cols.T @ g).astype(F32),
            "bias": g.sum(axis=0).astype(F32),
        }
        dcols = g @ self.weight.T
        return col2im(dcols, in_shape, self.kernel, self.kernel, self.stride, self.pad)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LutDense:
    """Dense layer replaced by codebook encoding plus table lookup."""

    trainable = True

    def __init__(self, lut: LutLayer):
        self.lut = lut
        self.grads: dict[str, np.ndarray] = {}
        self.dtheta = 0.0

    @property
    def weight(self):
        return self.lut.weight

    @property
    def bias(self):
        return self.lut.bias

    def core_shape(self) -> tuple[int, int]:
        return self.lut.d, self.lut.m

    def forward(self, x: np.ndarray, train: bool = False):
        orig_shape = x.shape
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        out, ste_cache = ste_forward(x, self.lut)
        return out, ((ste_cache, orig_shape) if train else None)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        ste_cache, orig_shape = cache
        g = ste_backward(grad, ste_cache, self.lut)
        self.grads = {"books": g["dP"], "weight": g["dW"], "bias": g["db"]}
        self.dtheta = g["dtheta"]
        return g["dA"].reshape(orig_shape)

    def param_items(self):
        return [
            ("books", self.lut.books),
            ("weight", self.lut.weight),
            ("bias", self.lut.bias),
        ]


class LutConv(Conv):
    """Convolution whose im2col'd core runs through the LUT path."""

    def __init__(self, in_channels, kernel, stride, pad, lut: LutLayer):
        self.in_channels = in_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.lut = lut
        self.grads: dict[str, np.ndarray] = {}
        self.dtheta = 0.0

    @property
    def weight(self):
        return self.lut.weight

    @property
    def bias(self):
        return self.lut.bias

    def forward(self, x: np.ndarray, train: bool = False):
        cols, h_out, w_out = self._lower(x)
        y, ste_cache = ste_forward(cols, self.lut)
        out = self._raise(y, x.shape[0], h_out, w_out)
        return out, ((ste_cache, x.shape, h_out, w_out) if train else None)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        ste_cache, in_shape, h_out, w_out = cache
        g = grad.transpose(0, 2, 3, 1).reshape(-1, grad.shape[1])
        gr = ste_backward(g, ste_cache, self.lut)
        self.grads = {"books": gr["dP"], "weight": gr["dW"], "bias": gr["db"]}
        self.dtheta = gr["dtheta"]
        return col2im(gr["dA"], in_shape, self.kernel, self.kernel, self.stride, self.pad)

    def param_items(self):
        return [
            ("books", self.lut.books),
            ("weight", self.lut.weight),
            ("bias", self.lut.bias),
        ]


LINEAR_TYPES = (Dense, Conv)  # LutConv subclasses Conv; LutDense checked separately


class Model:
    """An ordered layer stack ending in logits (loss applied by the trainer)."""

    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x: np.ndarray, train: bool = False):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train=train)
            caches.append(cache)
        return x, caches

    def backward(self, grad: np.ndarray, caches: list) -> np.ndarray:
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)
        return grad

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x, train=False)
        return out

    def linear_indices(self) -> list[int]:
        return [
            i
            for i, layer in enumerate(self.layers)
            if isinstance(layer, LINEAR_TYPES) or isinstance(layer, LutDense)
        ]

    def lut_layers(self) -> list[LutLayer]:
        return [
            layer.lut
            for layer in self.layers
            if isinstance(layer, (LutDense, LutConv))
        ]

    def activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Output of every layer in order (for layer-wise MSE reports)."""
        outs = []
        for layer in self.layers:
            x, _ = layer.forward(x, train=False)
            outs.append(x)
        return outs


def build_mlp(in_dim: int, classes: int, hidden: int = 32, depth: int = 4,
              rng: np.random.Generator | None = None) -> Model:
    """MLP with ``depth`` linear layers and ReLU between them."""
    if depth < 1:
        raise ConfigError("mlp needs at least one linear layer")
    layers: list = []
    d = in_dim
    for i in range(depth - 1):
        layers.append(Dense(d, hidden, rng))
        layers.append(Relu())
        d = hidden
    layers.append(Dense(d, classes, rng))
    return Model(layers)


def build_tinycnn(image_shape: tuple[int, int, int], classes: int,
                  rng: np.random.Generator | None = None) -> Model:
    """Two 3x3 convolutions (second with stride 2) and a dense head."""
    in_ch, h, w = image_shape
    if h % 2 or w % 2:
        raise ConfigError(f"tinycnn needs even spatial dims, got {h}x{w}")
    layers = [
        Conv(in_ch, 8, kernel=3, stride=1, pad=1, rng=rng),
        Relu(),
        Conv(8, 16, kernel=3, stride=2, pad=1, rng=rng),
        Relu(),
        Dense(16 * (h // 2) * (w // 2), classes, rng),
    ]
    return Model(layers)


@dataclass(frozen=True)
class ConvertConfig:
    """How to turn trailing linear layers of a float model into LUT layers."""

    replace_last_n: int
    k: int = 16
    v_dense: int = 2
    v_conv: int = 9
    include_first: bool = False
    qat: bool = False
    kmeans_iters: int = 25
    seed: int = 0


def init_from_float(model: Model, sample_inputs: np.ndarray, convert: ConvertConfig) -> Model:
    """Clone a float model and replace its trailing linear layers.

    Forwards the float model over ``sample_inputs``, collects every chosen
    layer's core input (the im2col'd matrix for convolutions), runs one
    k-means per codebook over the matching sub-vector slices, and swaps the
    layer for its LUT twin with the table built from the float weights.
    Temperatures start at t = 1.
    """
    new = copy.deepcopy(model)
    if convert.replace_last_n == 0:
        return new
    linear = new.linear_indices()
    eligible = linear if convert.include_first else linear[1:]
    if convert.replace_last_n > len(eligible):
        raise ConfigError(
            f"cannot replace {convert.replace_last_n} layers; only {len(eligible)} eligible"
            + ("" if convert.include_first else " (first linear layer is protected)")
        )
    chosen = set(eligible[len(eligible) - convert.replace_last_n :])

    _, caches = new.forward(np.ascontiguousarray(sample_inputs, dtype=F32), train=True)

    for idx in sorted(chosen):
        layer = new.layers[idx]
        if isinstance(layer, (LutDense, LutConv)):
            raise ConfigError(f"layer {idx} is already LUT-replaced")
        core_input = _core_input(layer, caches[idx])
        d = layer.core_shape()[0]
        v = convert.v_conv if isinstance(layer, Conv) else convert.v_dense
        if d % v != 0:
            raise ConfigError(f"layer {idx}: width {d} not divisible by sub-vector length {v}")
        lut = LutLayer.from_dense(
            weight=layer.weight,
            bias=layer.bias,
            cfg=PqConfig(v=v, k=convert.k),
            sample_inputs=core_input,
            rng=child_rng(convert.seed, idx),
            max_iters=convert.kmeans_iters,
            qat=convert.qat,
        )
        if isinstance(layer, Conv):
            new.layers[idx] = LutConv(layer.in_channels, layer.kernel, layer.stride, layer.pad, lut)
        else:
            new.layers[idx] = LutDense(lut)
    return new


def _core_input(layer, cache) -> np.ndarray:
    if isinstance(layer, Conv):
        return cache[0]  # im2col'd patches
    return cache[0]  # flattened dense input
