"""End-to-end experiment orchestration used by the CLI.

A training run has three stages: train the float model, convert trailing
linear layers to LUT layers (k-means on collected activations), then
fine-tune centroids/weights/temperatures with the hard-forward,
soft-backward estimator. Evaluation always goes through the fast kernels,
so the deployed path is what gets measured.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import load_model, save_model
from .costs import ModelCostReport, model_cost
from .datasets import Dataset, load_task
from .errors import ConfigError
from .hashing import build_hash_tree, hash_agreement
from .kernels import KernelPlan, bench_kernel, lut_layer_infer
from .model import (
    Conv,
    ConvertConfig,
    Dense,
    LutConv,
    LutDense,
    Model,
    build_mlp,
    build_tinycnn,
    init_from_float,
)
from .pq import mse
from .rng import child_rng
from .softpq import TemperatureSchedule
from .tensor import F32
from .train import EpochMetrics, TrainConfig, train


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a training run needs; validated up front."""

    task: str = "toy-spiral"
    model: str = "mlp"
    replace_last_n: int = 2
    k: int = 16
    v: int = 2
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    quantize_tables: bool = False
    seed: int = 0
    epochs: int = 150
    float_epochs: int = 150
    batch_size: int = 64
    float_batch_size: int = 32
    lr_float: float = 0.02
    lr_centroid: float = 5e-3
    lr_weight: float = 3e-3
    lr_temperature: float = 3e-2
    include_first: bool = False
    hidden: int = 48
    depth: int = 4
    hash_levels: int = 0
    kmeans_samples: int = 1024

    def __post_init__(self) -> None:
        if self.model not in ("mlp", "tinycnn"):
            raise ConfigError(f"unknown model template {self.model!r}")
        if self.replace_last_n < 0 or self.k < 1 or self.v < 1:
            raise ConfigError("replace_last_n, k and v must be non-negative/positive")
        if self.hash_levels < 0:
            raise ConfigError("hash_levels must be >= 0")


@dataclass
class TrainResult:
    float_model: Model
    model: Model
    dataset: Dataset
    float_metrics: list[EpochMetrics]
    metrics: list[EpochMetrics]

    @property
    def final_accuracy(self) -> float:
        if self.metrics:
            return self.metrics[-1].accuracy
        return self.float_metrics[-1].accuracy


def build_template(cfg: ExperimentConfig, data: Dataset) -> Model:
    rng = child_rng(cfg.seed, 1000)
    if cfg.model == "mlp":
        return build_mlp(data.flat_dim, data.n_classes, hidden=cfg.hidden, depth=cfg.depth, rng=rng)
    if data.image_shape is None:
        raise ConfigError("tinycnn needs an image dataset (idx:...); toy tasks are 2-D")
    return build_tinycnn(data.image_shape, data.n_classes, rng=rng)


def run_train(
    cfg: ExperimentConfig,
    out_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    float_metrics_path: str | Path | None = None,
    dataset: Dataset | None = None,
) -> TrainResult:
    data = dataset if dataset is not None else load_task(cfg.task, cfg.seed)
    model = build_template(cfg, data)

    float_cfg = TrainConfig(
        epochs=cfg.float_epochs,
        batch_size=cfg.float_batch_size,
        seed=cfg.seed,
        lr_weight=cfg.lr_float,
    )
    float_metrics = train(
        model,
        data.x_train,
        data.y_train,
        float_cfg,
        x_eval=data.x_test,
        y_eval=data.y_test,
        metrics_path=float_metrics_path,
    )

    metrics: list[EpochMetrics] = []
    lut_model = model
    if cfg.replace_last_n > 0:
        sample = data.x_train[: cfg.kmeans_samples]
        lut_model = init_from_float(
            model,
            sample,
            ConvertConfig(
                replace_last_n=cfg.replace_last_n,
                k=cfg.k,
                v_dense=cfg.v,
                include_first=cfg.include_first,
                qat=cfg.quantize_tables,
                seed=cfg.seed,
            ),
        )
        soft_cfg = TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            lr_centroid=cfg.lr_centroid,
            lr_weight=cfg.lr_weight,
            lr_temperature=cfg.lr_temperature,
            quantize_tables=cfg.quantize_tables,
            replace_last_n=cfg.replace_last_n,
            temperature=cfg.temperature,
        )
        metrics = train(
            lut_model,
            data.x_train,
            data.y_train,
            soft_cfg,
            x_eval=data.x_test,
            y_eval=data.y_test,
            float_ref=model,
            metrics_path=metrics_path,
        )
        if cfg.hash_levels:
            attach_hash_trees(lut_model, data.x_train, cfg.hash_levels)

    if out_path is not None:
        save_model(out_path, lut_model)
    return TrainResult(
        float_model=model,
        model=lut_model,
        dataset=data,
        float_metrics=float_metrics,
        metrics=metrics,
    )


def collect_core_inputs(model: Model, x: np.ndarray) -> dict[int, np.ndarray]:
    """Core (2-D, post-lowering) input of every linear layer on a forward pass."""
    _, caches = model.forward(np.ascontiguousarray(x, dtype=F32), train=True)
    cores: dict[int, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (LutDense, LutConv)):
            cores[i] = caches[i][0].a
        elif isinstance(layer, (Dense, Conv)):
            cores[i] = caches[i][0]
    return cores


def attach_hash_trees(model: Model, x: np.ndarray, levels: int) -> None:
    """Fit per-codebook hash trees for every LUT layer from its activations."""
    cores = collect_core_inputs(model, x)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (LutDense, LutConv)):
            lut = layer.lut
            v = lut.cfg.v
            core = cores[i]
            lut.trees = [
                build_hash_tree(core[:, c * v : (c + 1) * v], lut.books[c], levels)
                for c in range(lut.books.shape[0])
            ]


def predict_fast(
    model: Model,
    x: np.ndarray,
    plan: KernelPlan = KernelPlan(),
    encoder: str = "dist",
    integer: bool | None = None,
) -> np.ndarray:
    """Inference through the optimized kernels (LUT layers only differ)."""
    for layer in model.layers:
        if isinstance(layer, LutConv):
            cols, h_out, w_out = layer._lower(x)
            y = lut_layer_infer(cols, layer.lut, plan, integer=integer, encoder=encoder)
            x = layer._raise(y, x.shape[0], h_out, w_out)
        elif isinstance(layer, LutDense):
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            x = lut_layer_infer(x, layer.lut, plan, integer=integer, encoder=encoder)
        else:
            x, _ = layer.forward(x, train=False)
    return x


def run_eval(
    model_path: str | Path,
    task: str,
    encoder: str = "dist",
    float_model_path: str | Path | None = None,
    seed: int = 0,
    plan: KernelPlan = KernelPlan(),
) -> dict:
    """Accuracy (fast-kernel path) plus MSE-vs-float and encoder agreement."""
    data = load_task(task, seed)
    model = load_model(model_path)
    logits = predict_fast(model, data.x_test, plan=plan, encoder=encoder)
    report: dict = {
        "accuracy": float(np.mean(np.argmax(logits, axis=1) == data.y_test)),
        "encoder": encoder,
        "n_test": int(data.y_test.shape[0]),
    }

    if encoder == "hash":
        agreements = []
        cores = collect_core_inputs(model, data.x_test)
        for i, layer in enumerate(model.layers):
            if isinstance(layer, (LutDense, LutConv)) and layer.lut.trees:
                agreements.append(hash_agreement(cores[i], layer.lut.trees, layer.lut.books))
        report["hash_agreement"] = agreements

    if float_model_path is not None:
        float_model = load_model(float_model_path)
        float_acts = float_model.activations(data.x_test)
        acts = model.activations(data.x_test)
        if len(float_acts) != len(acts):
            raise ConfigError("float twin has a different layer structure")
        report["per_layer_mse"] = [
            mse(a, fa) for a, fa in zip(acts, float_acts)
        ]
        report["output_mse"] = mse(logits, float_model.predict_logits(data.x_test))
        report["float_accuracy"] = float(
            np.mean(np.argmax(float_model.predict_logits(data.x_test), axis=1) == data.y_test)
        )
    return report


SWEEP_HEADER = [
    "k", "v", "replace_last_n", "temperature", "seed",
    "accuracy", "flops_lut", "size_lut_bytes",
]


def _sweep_cell(args: tuple) -> list[str]:
    cfg_kwargs, k, v, n_replace, temp_text, seed = args
    cfg = ExperimentConfig(
        **cfg_kwargs,
        k=k,
        v=v,
        replace_last_n=n_replace,
        temperature=TemperatureSchedule.parse(temp_text),
        seed=seed,
    )
    result = run_train(cfg)
    report = model_cost(linear_layer_costs(result.model, result.dataset.x_train[:1]))
    return [
        str(k), str(v), str(n_replace), temp_text, str(seed),
        f"{result.final_accuracy:.6f}", str(report.flops_lut), str(report.size_lut_bytes),
    ]


def run_sweep(
    base: ExperimentConfig,
    ks: list[int],
    vs: list[int],
    replace_ns: list[int],
    temperatures: list[str],
    seeds: list[int],
    out_csv: str | Path,
) -> int:
    """Grid sweep; one CSV row per cell, resumable by key. Returns rows added.

    Cells are independent; LUTKIT_THREADS > 1 dispatches them to a process
    pool with per-cell deterministic seeds.
    """
    cells = [
        (k, v, n, t, s)
        for k in ks
        for v in vs
        for n in replace_ns
        for t in temperatures
        for s in seeds
    ]
    if not cells:
        raise ConfigError("sweep grid is empty")

    out_csv = Path(out_csv)
    done: set[tuple] = set()
    if out_csv.exists():
        with open(out_csv, newline="") as f:
            for row in csv.DictReader(f):
                done.add((int(row["k"]), int(row["v"]), int(row["replace_last_n"]),
                          row["temperature"], int(row["seed"])))
    else:
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            csv.writer(f).writerow(SWEEP_HEADER)

    todo = [cell for cell in cells if cell not in done]
    base_kwargs = {
        "task": base.task, "model": base.model, "quantize_tables": base.quantize_tables,
        "epochs": base.epochs, "float_epochs": base.float_epochs,
        "batch_size": base.batch_size, "float_batch_size": base.float_batch_size,
        "lr_float": base.lr_float,
        "lr_centroid": base.lr_centroid, "lr_weight": base.lr_weight,
        "lr_temperature": base.lr_temperature, "include_first": base.include_first,
        "hidden": base.hidden, "depth": base.depth, "kmeans_samples": base.kmeans_samples,
    }
    jobs = [(base_kwargs, *cell) for cell in todo]

    workers = int(os.environ.get("LUTKIT_THREADS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]

    with open(out_csv, "a", newline="") as f:
        writer = csv.writer(f)
        for row in rows:
            writer.writerow(row)
    return len(rows)


def linear_layer_costs(model: Model, sample_x: np.ndarray) -> list[dict]:
    """Per-linear-layer cost descriptors for :func:`lutkit.costs.model_cost`.

    Row counts come from an actual 1-sample forward pass, matching the
    batch-size-1 benchmarking convention.
    """
    cores = collect_core_inputs(model, sample_x[:1])
    specs = []
    for i, layer in enumerate(model.layers):
        if i not in cores:
            continue
        rows = cores[i].shape[0]
        if isinstance(layer, (LutDense, LutConv)):
            d, m = layer.lut.d, layer.lut.m
            specs.append({
                "name": f"layer{i}", "n": rows, "d": d, "m": m,
                "k": layer.lut.cfg.k, "v": layer.lut.cfg.v,
                "table_bits": 8 if layer.lut.qtable is not None else 32,
            })
        else:
            d, m = layer.core_shape()
            specs.append({"name": f"layer{i}", "n": rows, "d": d, "m": m})
    return specs


def run_bench(
    shapes: list[tuple[int, int, int, int, int]],
    plan: KernelPlan,
    repetitions: int,
    out_csv: str | Path | None,
    seed: int = 0,
) -> list:
    from .kernels import BenchReport

    reports = []
    for i, shape in enumerate(shapes):
        reports.append(bench_kernel(shape, plan, repetitions, rng=child_rng(seed, i)))
    if out_csv is not None:
        out_csv = Path(out_csv)
        new_file = not out_csv.exists()
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "a") as f:
            if new_file:
                f.write(BenchReport.CSV_HEADER + "\n")
            for report in reports:
                f.write(report.csv_row() + "\n")
    return reports


def run_cost_for_model(model_path: str | Path, task: str | None, seed: int = 0) -> ModelCostReport:
    model = load_model(model_path)
    if task:
        data = load_task(task, seed)
        sample = data.x_train[:1]
    else:
        sample = _probe_input(model)
    return model_cost(linear_layer_costs(model, sample))


def _probe_input(model: Model) -> np.ndarray:
    first = model.layers[0]
    if isinstance(first, Conv):
        side = 8
        return np.zeros((1, first.in_channels, side, side), dtype=F32)
    d = first.core_shape()[0] if hasattr(first, "core_shape") else None
    if d is None:
        raise ConfigError("cannot infer an input shape for this model; pass --task")
    return np.zeros((1, d), dtype=F32)
