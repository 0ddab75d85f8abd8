"""Minibatch trainer for the small-model stack.

SGD with momentum 0.9 on weights, biases and centroids; plain SGD with its
own (typically larger) learning rate on each layer's log-temperature.
After every optimizer step each LUT layer rebuilds its lookup table from
the updated centroids and weights, so the table is never stale. Training
is single-threaded and bitwise deterministic for a fixed config and seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import LutConv, LutDense, Model
from .pq import mse
from .rng import make_rng
from .softpq import TemperatureSchedule
from .tensor import F32


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    lr_centroid: float = 1e-2
    lr_weight: float = 1e-2
    lr_temperature: float = 1e-1
    momentum: float = 0.9
    quantize_tables: bool = False
    replace_last_n: int = 0
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        for name in ("lr_centroid", "lr_weight", "lr_temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.replace_last_n < 0:
            raise ConfigError("replace_last_n must be >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    mse_vs_float: float
    temperatures: tuple[float, ...]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(F32)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    logits = model.predict_logits(x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train(
    model: Model,
    x_train: np.ndarray,
    y_train: np.ndarray,
    cfg: TrainConfig,
    x_eval: np.ndarray | None = None,
    y_eval: np.ndarray | None = None,
    float_ref: Model | None = None,
    metrics_path: str | Path | None = None,
) -> list[EpochMetrics]:
    """Train in place; returns per-epoch metrics (and appends them as CSV rows).

    ``float_ref`` enables the mse_vs_float column: mean squared difference
    between this model's logits and the float model's logits on the eval
    split. Accuracy is measured on the eval split when given, else on the
    training split.
    """
    rng = make_rng(cfg.seed)
    if x_eval is None or y_eval is None:
        x_eval, y_eval = x_train, y_train
    lut_wrappers = [l for l in model.layers if isinstance(l, (LutDense, LutConv))]
    for wrapper in lut_wrappers:
        wrapper.lut.qat = cfg.quantize_tables
        wrapper.lut.rebuild()

    velocity: dict[tuple[int, str], np.ndarray] = {}
    float_logits = float_ref.predict_logits(x_eval) if float_ref is not None else None
    n = x_train.shape[0]
    history: list[EpochMetrics] = []
    writer = _MetricsWriter(metrics_path, len(lut_wrappers)) if metrics_path else None

    for epoch in range(cfg.epochs):
        if not cfg.temperature.learned:
            t_epoch = cfg.temperature.value_for_epoch(epoch, cfg.epochs)
            for wrapper in lut_wrappers:
                wrapper.lut.temp.set_t(t_epoch)

        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            out, caches = model.forward(x_train[idx], train=True)
            loss, grad = softmax_cross_entropy(out, y_train[idx])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}"
                )
            epoch_loss += loss * idx.size
            model.backward(grad, caches)
            _sgd_step(model, cfg, velocity)

        metrics = EpochMetrics(
            epoch=epoch,
            loss=epoch_loss / n,
            accuracy=accuracy(model, x_eval, y_eval),
            mse_vs_float=(
                mse(model.predict_logits(x_eval), float_logits)
                if float_logits is not None
                else 0.0
            ),
            temperatures=tuple(w.lut.temp.t for w in lut_wrappers),
        )
        history.append(metrics)
        if writer:
            writer.append(metrics)
    return history


def _sgd_step(model: Model, cfg: TrainConfig, velocity: dict) -> None:
    for i, layer in enumerate(model.layers):
        if not getattr(layer, "trainable", False) or not layer.grads:
            continue
        for pname, param in layer.param_items():
            grad = layer.grads.get(pname)
            if grad is None:
                continue
            key = (i, pname)
            buf = velocity.get(key)
            if buf is None:
                buf = np.zeros_like(param)
                velocity[key] = buf
            buf *= cfg.momentum
            buf += grad
            lr = cfg.lr_centroid if pname == "books" else cfg.lr_weight
            param -= F32(lr) * buf
        if isinstance(layer, (LutDense, LutConv)):
            if cfg.temperature.learned and cfg.lr_temperature > 0:
                theta = layer.lut.temp.theta - cfg.lr_temperature * layer.dtheta
                if not np.isfinite(theta):
                    raise DivergenceError("log-temperature diverged")
                layer.lut.temp.theta = float(theta)
            layer.lut.rebuild()
        layer.grads = {}


class _MetricsWriter:
    """Appends epoch rows to a CSV: epoch,loss,accuracy,mse_vs_float,t_i..."""

    def __init__(self, path: str | Path, n_lut_layers: int):
        self.path = Path(path)
        header = ["epoch", "loss", "accuracy", "mse_vs_float"]
        header += [f"t_{i}" for i in range(n_lut_layers)]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(header)

    def append(self, m: EpochMetrics) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(
                [m.epoch, f"{m.loss:.8f}", f"{m.accuracy:.6f}", f"{m.mse_vs_float:.8e}"]
                + [f"{t:.8f}" for t in m.temperatures]
            )
