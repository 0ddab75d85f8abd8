"""Command-line interface: train, eval, sweep, bench, cost.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric
divergence. Every command takes --seed and produces bitwise-reproducible
outputs (benchmark timings excluded).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .costs import cost
from .errors import ConfigError, DataError, DivergenceError
from .kernels import KernelPlan
from .pipeline import (
    ExperimentConfig,
    run_bench,
    run_cost_for_model,
    run_eval,
    run_sweep,
    run_train,
)
from .softpq import TemperatureSchedule


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DivergenceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(4)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def _parse_shape(text: str) -> tuple[int, int, int, int, int]:
    parts = _parse_ints(text)
    if len(parts) != 5:
        raise ConfigError(f"shape must be N,D,M,K,V; got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


@click.group()
def main() -> None:
    """LUT-based approximate-matmul inference kit."""


@main.command()
@click.option("--model", "template", default="mlp", show_default=True,
              type=click.Choice(["mlp", "tinycnn"]))
@click.option("--task", default="toy-spiral", show_default=True,
              help="toy-spiral | toy-gauss | csv:FILE | idx:IMG,LBL[,IMG,LBL]")
@click.option("--replace-last", "replace_last_n", default=2, show_default=True)
@click.option("--centroids", "k", default=16, show_default=True)
@click.option("--subvec", "v", default=2, show_default=True,
              help="sub-vector length for dense layers (3x3 convs use 9)")
@click.option("--temperature", default="learned", show_default=True,
              help="learned | fixed:T | annealed:T0:T1")
@click.option("--quantize-tables/--no-quantize-tables", default=False, show_default=True)
@click.option("--replace-first", "include_first", is_flag=True,
              help="allow replacing the first linear layer (degrades accuracy)")
@click.option("--epochs", default=40, show_default=True)
@click.option("--float-epochs", default=80, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--lr-float", default=0.05, show_default=True)
@click.option("--lr-centroid", default=1e-2, show_default=True)
@click.option("--lr-weight", default=1e-2, show_default=True)
@click.option("--lr-temperature", default=1e-1, show_default=True)
@click.option("--hidden", default=32, show_default=True)
@click.option("--depth", default=4, show_default=True)
@click.option("--hash-levels", default=0, show_default=True,
              help="if > 0, fit hash trees of this depth after training")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default="model.lutn", show_default=True,
              type=click.Path(dir_okay=False))
@click.option("--metrics", "metrics_path", default=None, type=click.Path(dir_okay=False),
              help="per-epoch CSV for the soft-PQ phase [default: OUT.metrics.csv]")
@_guard
def train(template, task, replace_last_n, k, v, temperature, quantize_tables,
          include_first, epochs, float_epochs, batch_size, lr_float, lr_centroid,
          lr_weight, lr_temperature, hidden, depth, hash_levels, seed, out_path,
          metrics_path) -> None:
    """Train a float model, convert trailing layers to LUTs, fine-tune, save."""
    cfg = ExperimentConfig(
        task=task,
        model=template,
        replace_last_n=replace_last_n,
        k=k,
        v=v,
        temperature=TemperatureSchedule.parse(temperature),
        quantize_tables=quantize_tables,
        seed=seed,
        epochs=epochs,
        float_epochs=float_epochs,
        batch_size=batch_size,
        lr_float=lr_float,
        lr_centroid=lr_centroid,
        lr_weight=lr_weight,
        lr_temperature=lr_temperature,
        include_first=include_first,
        hidden=hidden,
        depth=depth,
        hash_levels=hash_levels,
    )
    if metrics_path is None:
        metrics_path = str(Path(out_path).with_suffix(".metrics.csv"))
    float_metrics_path = str(Path(out_path).with_suffix(".float-metrics.csv"))
    result = run_train(
        cfg,
        out_path=out_path,
        metrics_path=metrics_path,
        float_metrics_path=float_metrics_path,
    )
    float_acc = result.float_metrics[-1].accuracy if result.float_metrics else float("nan")
    click.echo(f"float accuracy:  {float_acc:.4f}")
    if result.metrics:
        click.echo(f"lut accuracy:    {result.metrics[-1].accuracy:.4f}")
        click.echo(f"mse vs float:    {result.metrics[-1].mse_vs_float:.6e}")
    click.echo(f"model written:   {out_path}")


@main.command("eval")
@click.argument("model_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--task", default="toy-spiral", show_default=True)
@click.option("--encoder", default="dist", show_default=True,
              type=click.Choice(["dist", "hash"]))
@click.option("--float-model", "float_model_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="float twin for per-layer MSE reporting")
@click.option("--seed", default=0, show_default=True)
@_guard
def eval_cmd(model_file, task, encoder, float_model_path, seed) -> None:
    """Evaluate a saved model through the fast kernels; prints a JSON report."""
    report = run_eval(model_file, task, encoder=encoder,
                      float_model_path=float_model_path, seed=seed)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command()
@click.option("--task", default="toy-spiral", show_default=True)
@click.option("--model", "template", default="mlp", show_default=True,
              type=click.Choice(["mlp", "tinycnn"]))
@click.option("--centroids", "ks", default="16", show_default=True, help="comma list of K")
@click.option("--subvec", "vs", default="2", show_default=True, help="comma list of V")
@click.option("--replace-last", "ns", default="2", show_default=True,
              help="comma list of replace_last_n")
@click.option("--temperature", "temps", default="learned", show_default=True,
              help="comma list of temperature modes")
@click.option("--seeds", default="0", show_default=True, help="comma list of seeds")
@click.option("--epochs", default=40, show_default=True)
@click.option("--float-epochs", default=80, show_default=True)
@click.option("--out", "out_csv", default="sweep.csv", show_default=True,
              type=click.Path(dir_okay=False))
@_guard
def sweep(task, template, ks, vs, ns, temps, seeds, epochs, float_epochs, out_csv) -> None:
    """Grid sweep over (K, V, replace_last_n, temperature, seed); resumable CSV."""
    base = ExperimentConfig(task=task, model=template, epochs=epochs,
                            float_epochs=float_epochs)
    added = run_sweep(
        base,
        ks=_parse_ints(ks),
        vs=_parse_ints(vs),
        replace_ns=_parse_ints(ns),
        temperatures=[t for t in temps.split(",") if t],
        seeds=_parse_ints(seeds),
        out_csv=out_csv,
    )
    click.echo(f"sweep rows added: {added} -> {out_csv}")


@main.command()
@click.option("--shapes", default="256,768,64,16,32;256,768,256,16,32;256,768,768,16,32",
              show_default=True, help="semicolon list of N,D,M,K,V")
@click.option("--repetitions", default=9, show_default=True)
@click.option("--n-block", default=64, show_default=True)
@click.option("--k-block", default=8, show_default=True)
@click.option("--group-size", default=128, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_csv", default=None, type=click.Path(dir_okay=False))
@_guard
def bench(shapes, repetitions, n_block, k_block, group_size, seed, out_csv) -> None:
    """Single-threaded kernel benchmark against the in-repo dense reference."""
    plan = KernelPlan(n_block=n_block, k_block=k_block, group_size=group_size)
    shape_list = [_parse_shape(s) for s in shapes.split(";") if s]
    reports = run_bench(shape_list, plan, repetitions, out_csv, seed=seed)
    from .kernels import BenchReport

    click.echo(BenchReport.CSV_HEADER)
    for report in reports:
        click.echo(report.csv_row())


@main.command("cost")
@click.option("--model-file", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--task", default=None, help="dataset used to size a model's inputs")
@click.option("--shape", default=None, help="N,D,M,K,V for a single-matmul report")
@click.option("--table-bits", default=8, show_default=True, type=click.Choice(["8", "32"]))
@click.option("--seed", default=0, show_default=True)
@_guard
def cost_cmd(model_file, task, shape, table_bits, seed) -> None:
    """Analytic FLOPs/size report (JSON) for a shape or a saved model."""
    if (model_file is None) == (shape is None):
        raise ConfigError("pass exactly one of --model-file or --shape")
    if shape is not None:
        n, d, m, k, v = _parse_shape(shape)
        click.echo(cost(n, d, m, k, v, table_bits=int(table_bits)).to_json())
    else:
        click.echo(run_cost_for_model(model_file, task, seed=seed).to_json())


if __name__ == "__main__":
    main()
