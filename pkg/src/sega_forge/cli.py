"""Command-line harness: guided-run tables, ablation matrices, diagnostics.

Subcommands share one config contract (the published JSON schema) and one
output discipline: delimited data files plus JSON reports, rendered
figures alongside, bytes identical across reruns and worker counts.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import plots
from .config import ConfigError, parse_seed_text
from .experiments import (
    ExperimentSpec,
    execute_ablate,
    execute_diag,
    execute_run,
    load_experiment,
)

_FINAL_COORD_LIMIT = 16


def _cell(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _parse_grid_value(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    raise SystemExit(2)


def _load_spec(config_path: str, grid_flags, seeds_text: str | None) -> ExperimentSpec:
    try:
        raw = json.loads(Path(config_path).read_text())
    except FileNotFoundError:
        _fail(f"config file not found: {config_path}")
    except json.JSONDecodeError as err:
        _fail(f"{config_path}:{err.lineno}:{err.colno}: {err.msg}")
    grid = dict(raw.get("grid", {}))
    for flag in grid_flags:
        key, _, values = flag.partition("=")
        if not values:
            _fail(f"--grid expects KEY=V1,V2,..., got {flag!r}")
        grid[key] = [_parse_grid_value(v) for v in values.split(",")]
    if grid:
        raw["grid"] = grid
    if seeds_text is not None:
        try:
            raw["seeds"] = parse_seed_text(seeds_text)
        except ConfigError as err:
            _fail(str(err))
    try:
        return load_experiment(raw)
    except ConfigError as err:
        _fail(str(err))


def _resolve_outputs(spec: ExperimentSpec, out: str | None, formats) -> tuple[Path, tuple[str, ...]]:
    directory = Path(out or spec.directory or "out")
    directory.mkdir(parents=True, exist_ok=True)
    chosen = tuple(formats) if formats else spec.formats
    return directory, chosen


def _announce(spec: ExperimentSpec) -> None:
    axes = spec.grid_axes
    variants = spec.variant_count()
    seeds = len(spec.seeds)
    click.echo(f"grid axes: {len(axes)}; variants: {variants}; "
               f"seeds: {seeds}; total runs: {variants * seeds}")


def _common(fn):
    fn = click.option("--seeds", "seeds_text", default=None, envvar="SEGA_FORGE_SEED",
                      help="Seed override: comma-separated or start..end "
                           "(flag > SEGA_FORGE_SEED > config file).")(fn)
    fn = click.option("--format", "formats", type=click.Choice(["csv", "json"]),
                      multiple=True, help="Restrict output formats.")(fn)
    fn = click.option("--out", default=None, help="Output directory.")(fn)
    fn = click.option("--jobs", type=click.IntRange(1, 64), default=1, show_default=True,
                      help="Worker processes for seed fan-out.")(fn)
    fn = click.option("--grid", "grid_flags", multiple=True, metavar="KEY=V1,V2,...",
                      help="Add or replace a grid axis (wins over the config file).")(fn)
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="Experiment config JSON.")(fn)
    return fn


@click.group()
def main() -> None:
    """Deterministic guided-diffusion experiment harness."""


@main.command()
@_common
def run(config_path, grid_flags, jobs, out, formats, seeds_text) -> None:
    """Run the config per seed and write run tables and reports."""
    spec = _load_spec(config_path, grid_flags, seeds_text)
    _announce(spec)
    output = execute_run(spec, jobs=jobs)
    directory, chosen = _resolve_outputs(spec, out, formats)
    axis_names = list(output.axis_names)
    if "csv" in chosen:
        header = (["variant"] + axis_names
                  + ["seed", "initial_norm", "path_length", "final_norm", "mean_mask_fraction"]
                  + [f"post_{tag}" for tag in output.tags])
        rows = []
        for entry in output.rows:
            axis_values = [value for _, value in entry["label"]]
            rows.append([entry["variant"], *axis_values, entry["seed"],
                         entry["initial_norm"], entry["path_length"], entry["final_norm"],
                         entry["mean_mask_fraction"],
                         *[entry["posteriors"][tag] for tag in output.tags]])
        _write_csv(directory / "runs.csv", header, rows)
        if output.dimension <= _FINAL_COORD_LIMIT:
            coord_header = ["variant", "seed"] + [f"x{i}" for i in range(output.dimension)]
            _write_csv(directory / "finals.csv", coord_header,
                       [[f["variant"], f["seed"], *f["final"]] for f in output.finals])
        _write_csv(directory / "masks.csv", ["variant", "step", "concept", "fraction"],
                   [[m["variant"], *row] for m in output.mask_reports for row in m["series"]])
    if "json" in chosen:
        _write_json(directory / "run_report.json", {
            "tags": list(output.tags),
            "dimension": output.dimension,
            "variants": [dict(label) for label in output.variants],
            "masks": [{"variant": m["variant"], **m["report"]} for m in output.mask_reports],
            "distributions": list(output.distributions),
        })
    first_rows = [e for e in output.rows if e["variant"] == 0]
    labels = ([max(e["posteriors"], key=e["posteriors"].get) for e in first_rows]
              if output.tags else None)
    plots.save_finals_scatter(directory / "finals.png",
                              [e["final"] for e in first_rows], labels)
    plots.save_sparsity_series(
        directory / "sparsity.png",
        [tuple(s) for s in output.mask_reports[0]["report"]["per_step_series"]])
    curves = []
    for name in ("final_values", "guidance_values"):
        report = output.distributions[0].get(name)
        if report:
            curves.append((name, report["kde"]["grid"], report["kde"]["density"]))
    plots.save_density(directory / "density.png", curves)
    click.echo(f"wrote {directory}")


@main.command()
@_common
@click.option("--long", "long_form", is_flag=True,
              help="Allow other than 2 grid axes; long-form output only.")
def ablate(config_path, grid_flags, jobs, out, formats, seeds_text, long_form) -> None:
    """Sweep a 2-axis grid into posterior and displacement matrices."""
    spec = _load_spec(config_path, grid_flags, seeds_text)
    _announce(spec)
    try:
        output = execute_ablate(spec, jobs=jobs, long=long_form)
    except ConfigError as err:
        _fail(str(err))
    directory, chosen = _resolve_outputs(spec, out, formats)
    if "csv" in chosen:
        header = list(output.axis_names) + ["posterior", "displacement"]
        _write_csv(directory / "ablate_cells.csv", header,
                   [[*(v for _, v in c["label"]), c["posterior"], c["displacement"]]
                    for c in output.cells])
        if output.posterior_matrix is not None:
            row_name, col_name = output.axis_names
            row_values, col_values = output.axis_values
            for stem, matrix in (("ablate_posterior", output.posterior_matrix),
                                 ("ablate_displacement", output.displacement_matrix)):
                head = [f"{row_name}\\{col_name}"] + [_cell(v) for v in col_values]
                body = [[_cell(rv), *matrix[i]] for i, rv in enumerate(row_values)]
                _write_csv(directory / f"{stem}.csv", head, body)
    if "json" in chosen:
        _write_json(directory / "ablate.json", {
            "axes": [{"name": n, "values": list(v)}
                     for n, v in zip(output.axis_names, output.axis_values)],
            "cells": [{"label": dict(c["label"]), "posterior": c["posterior"],
                       "displacement": c["displacement"]} for c in output.cells],
        })
    if output.posterior_matrix is not None:
        row_name, col_name = output.axis_names
        row_values, col_values = output.axis_values
        plots.save_heatmap(directory / "ablate_posterior.png", output.posterior_matrix,
                           row_name, row_values, col_name, col_values, "mean target posterior")
        plots.save_heatmap(directory / "ablate_displacement.png", output.displacement_matrix,
                           row_name, row_values, col_name, col_values, "mean displacement")
    click.echo(f"wrote {directory}")


@main.command()
@_common
def diag(config_path, grid_flags, jobs, out, formats, seeds_text) -> None:
    """Distribution reports of noise estimates under each conditioning."""
    spec = _load_spec(config_path, grid_flags, seeds_text)
    click.echo(f"diagnostics at step {spec.diag_step} over {spec.diag_draws} draws")
    output = execute_diag(spec)
    directory, chosen = _resolve_outputs(spec, out, formats)
    if "csv" in chosen:
        _write_csv(directory / "diag_moments.csv",
                   ["name", "mean", "variance", "skewness", "excess_kurtosis",
                    "bandwidth", "sample_count"],
                   [[name, r.mean, r.variance, r.skewness, r.excess_kurtosis,
                     r.bandwidth, r.sample_count] for name, r in output.reports])
        _write_csv(directory / "diag_kde.csv", ["name", "index", "x", "density"],
                   [[name, *row] for name, r in output.reports for row in r.kde_rows()])
    if "json" in chosen:
        _write_json(directory / "diag.json", {
            "step": output.step,
            "draws": output.draws,
            "reports": {name: r.to_json() for name, r in output.reports},
        })
    plots.save_density(directory / "diag.png",
                       [(name, r.grid, r.density) for name, r in output.reports],
                       title=f"estimate densities at t={output.step}")
    click.echo(f"wrote {directory}")


if __name__ == "__main__":
    main()
