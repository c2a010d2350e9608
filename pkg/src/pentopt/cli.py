"""Command-line front door.

Subcommands: train, predict, validate, generate-data, compare, serve,
export. Exit codes: 0 ok, 1 runtime failure, 2 usage error. The config
file is canonical; flags override individual values. PEN_SEED serves as a
seed fallback when neither config nor flag provides one.
"""

from __future__ import annotations

import json
import os
import sys
import time

import click
import numpy as np

from . import evaluators, fem, metrics, simp_ref
from .domain import (BoundaryConditionSet, InputSample, Level,
                     export_image, load_geometry, save_geometry)
from .evaluators import QualityCoefficients
from .predictor import ModelLoadError, load_model
from .service import evaluate_losses
from .trainer import TrainingConfig, TrainingError, train


def _seed_fallback(seed):
    if seed is not None:
        return seed
    env = os.environ.get("PEN_SEED")
    return int(env) if env else None


@click.group()
def main():
    """Neural topology optimization without pre-optimized training data."""


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="TOML or JSON training config")
@click.option("--resume", "resume_path", type=click.Path(exists=True),
              help="checkpoint directory to continue from")
@click.option("--seed", type=int, default=None)
@click.option("--max-level", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default="run")
def cli_train(config_path, resume_path, seed, max_level, out_dir):
    """Train a predictor; writes model, history CSV and checkpoints."""
    try:
        config = TrainingConfig.from_file(config_path) if config_path \
            else TrainingConfig()
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc))
    seed = _seed_fallback(seed)
    if seed is not None:
        config.seed = seed
    if max_level is not None:
        if not 1 <= max_level <= config.levels:
            raise click.UsageError(f"max-level must be in 1..{config.levels}")
        config.max_level = max_level
    os.makedirs(out_dir, exist_ok=True)

    def report(rec, zeta):
        if rec.b % 25 == 0 or rec.b == 1:
            click.echo(
                f"batch {rec.b:6d}  level {rec.level}  J {rec.J:10.4f}  "
                f"c {rec.c_mean:8.4f}  M {rec.m_mean:6.4f}  zeta {zeta}"
            )

    try:
        result = train(config, out_dir=out_dir, resume_from=resume_path,
                       on_batch=report)
    except TrainingError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"done: {len(result.history.records)} batches, "
               f"model written to {os.path.join(out_dir, 'model')}")


def _parse_node(node):
    try:
        row, col = (int(v) for v in node.split(","))
    except ValueError:
        raise click.UsageError(f"--node must be 'row,col', got {node!r}")
    return row, col


@main.command("predict")
@click.argument("model_path", type=click.Path(exists=True))
@click.option("--fx", type=float, default=0.0)
@click.option("--fy", type=float, default=0.0)
@click.option("--node", type=str, default=None, help="force node as 'row,col'")
@click.option("--bc-file", type=click.Path(exists=True), default=None,
              help="JSON file with rkx/rky/rsx/rsy matrices")
@click.option("--fill", type=float, required=True)
@click.option("--level", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), default="geometry.json")
@click.option("--png", "png_path", type=click.Path(), default=None)
def cli_predict(model_path, fx, fy, node, bc_file, fill, level, out_path,
                png_path):
    """Predict one geometry and print its evaluator losses."""
    try:
        predictor = load_model(model_path)
    except ModelLoadError as exc:
        raise click.ClickException(str(exc))
    d_inp = predictor.arch.d_inp
    if not 0.2 <= fill <= 0.8:
        click.echo(f"warning: fill {fill} outside the trained grid [0.2, 0.8]; "
                   "clamping", err=True)
        fill = min(max(fill, 0.2), 0.8)
    if bc_file:
        with open(bc_file) as fh:
            raw = json.load(fh)
        bc = BoundaryConditionSet(
            rkx=np.asarray(raw["rkx"], dtype=bool),
            rky=np.asarray(raw["rky"], dtype=bool),
            rsx=np.asarray(raw["rsx"], dtype=float),
            rsy=np.asarray(raw["rsy"], dtype=float),
        )
    else:
        if node is None:
            raise click.UsageError("provide --node (with --fx/--fy) or --bc-file")
        row, col = _parse_node(node)
        if not (0 <= row <= d_inp and 0 <= col <= d_inp):
            raise click.UsageError(
                f"node ({row}, {col}) outside the 0..{d_inp} grid")
        if col == 0:
            raise click.UsageError(
                f"node ({row}, {col}) lies on the clamped left edge")
        bc = BoundaryConditionSet.left_edge_clamped(d_inp)
        bc.rsx[row, col] = fx
        bc.rsy[row, col] = fy
    level = level if level is not None else predictor.arch.levels
    sample = InputSample(bc=bc, m_tar=fill)
    fld = predictor.predict(sample, level)
    save_geometry(fld, out_path)
    if png_path:
        export_image(fld, png_path)
    losses = evaluate_losses(fld, sample, QualityCoefficients(), {})
    click.echo(f"geometry {fld.d}x{fld.d} written to {out_path}")
    click.echo(f"losses: c={losses['c']:.4f} M={losses['m']:.4f} "
               f"F={losses['f']:.4f} P={losses['p']:.4f}")


@main.command("validate")
@click.argument("model_path", type=click.Path(exists=True))
@click.argument("dataset_path", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="write the JSON report here")
def cli_validate(model_path, dataset_path, out_path):
    """Compare model predictions against a validation dataset."""
    try:
        predictor = load_model(model_path)
    except ModelLoadError as exc:
        raise click.ClickException(str(exc))
    records = simp_ref.load_validation_set(dataset_path)
    if not records:
        raise click.UsageError(f"dataset {dataset_path} is empty")
    report = metrics.ComparisonReport()
    for sample, ref_field, c_ref, _ in records:
        lam = ref_field.level.lam
        if lam > predictor.arch.levels:
            raise click.ClickException(
                f"dataset level {lam} exceeds model levels "
                f"{predictor.arch.levels}")
        t0 = time.perf_counter()
        pred = predictor.predict(sample, lam)
        dt = time.perf_counter() - t0
        prob = fem.FemProblem(pred.level, sample.bc)
        c_pred = float(evaluators.compliance(pred.x, [prob]))
        report.add(pred, ref_field, c_pred=c_pred, c_ref=c_ref, seconds=dt)
    click.echo(report.to_table())
    if not 0.0 <= report.kappa <= 1.0:
        raise click.ClickException(f"kappa {report.kappa} outside [0, 1]")
    if out_path:
        tmp = out_path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(report.to_json())
        os.replace(tmp, out_path)
        click.echo(f"report written to {out_path}")


@main.command("generate-data")
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=None)
@click.option("--level", type=int, default=4)
@click.option("--d-inp", type=int, default=8)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cli_generate_data(n, seed, level, d_inp, out_path):
    """Generate a conventionally optimized validation dataset (JSON lines)."""
    seed = _seed_fallback(seed) or 0
    if n < 1:
        raise click.UsageError("--n must be at least 1")
    records, meta = simp_ref.generate_validation_set(
        n, seed, Level(level, d_inp))
    simp_ref.save_validation_set(records, meta, out_path)
    click.echo(f"{n} records written to {out_path} "
               f"({meta['replacements']} replacements)")


@main.command("compare")
@click.argument("model_path", type=click.Path(exists=True))
@click.option("--level", type=int, default=4)
@click.option("--seed", type=int, default=0)
@click.option("--training-seconds", type=float, default=None,
              help="training wall time for the break-even estimate")
def cli_compare(model_path, level, seed, training_seconds):
    """Time one prediction against one conventional optimization."""
    predictor = load_model(model_path)
    rng = np.random.default_rng(seed)
    from .trainer import random_sample

    sample = random_sample(rng, predictor.arch.d_inp)
    lvl = Level(level, predictor.arch.d_inp)
    predictor.predict(sample, level)  # warm up
    t0 = time.perf_counter()
    predictor.predict(sample, level)
    t_pred = time.perf_counter() - t0
    t0 = time.perf_counter()
    result = simp_ref.optimize(sample.bc, sample.m_tar, lvl)
    t_conv = time.perf_counter() - t0
    click.echo(f"prediction: {t_pred * 1000:.2f} ms")
    click.echo(f"conventional ({result.iterations} iterations): {t_conv:.2f} s")
    click.echo(f"speedup: {t_conv / t_pred:.1f}x")
    if training_seconds is not None:
        bep = metrics.break_even(training_seconds, t_pred, t_conv)
        click.echo(f"break-even after {bep:.1f} predictions")


@main.command("serve")
@click.option("--model", "model_path", type=click.Path(exists=True),
              required=True)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def cli_serve(model_path, host, port):
    """Run the HTTP inference service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(model_path), host=host, port=port)


@main.command("export")
@click.argument("geometry_path", type=click.Path(exists=True))
@click.option("--png", "png_path", type=click.Path(), required=True)
def cli_export(geometry_path, png_path):
    """Render a geometry JSON file to a grayscale image."""
    fld = load_geometry(geometry_path)
    export_image(fld, png_path)
    click.echo(f"{fld.d}x{fld.d} image written to {png_path}")


if __name__ == "__main__":
    sys.exit(main())
