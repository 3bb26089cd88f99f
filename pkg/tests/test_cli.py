"""Experiment engine and command-line harness."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from sega_forge.cli import main
from sega_forge.config import ConfigError
from sega_forge.experiments import (
    execute_ablate,
    execute_diag,
    execute_run,
    load_experiment,
    spearman,
)


def two_cluster_obj(var=0.25, sep=0.8):
    return {
        "components": [
            {"weight": 0.5, "mean": [-sep, 0.0], "covariance": [[var, 0.0], [0.0, var]],
             "labels": ["left"]},
            {"weight": 0.5, "mean": [sep, 0.0], "covariance": [[var, 0.0], [0.0, var]],
             "labels": ["right"]},
        ]
    }


def experiment_obj(**over):
    base = {
        "model": two_cluster_obj(),
        "schedule": {"steps": 15},
        "guidance": {"concepts": [
            {"condition": "right", "edit_scale": 8.0, "threshold": 0.7},
        ]},
        "seeds": [0, 1, 2],
    }
    base.update(over)
    return base


# -- load validation ----------------------------------------------------------

def test_load_rejects_unresolvable_grid_path():
    obj = experiment_obj(grid={"concepts[3].edit_scale": [1.0]})
    with pytest.raises(ConfigError, match="concepts"):
        load_experiment(obj)


def test_load_rejects_diag_step_past_schedule():
    obj = experiment_obj(diagnostics={"step": 16})
    with pytest.raises(ConfigError, match="schedule.steps"):
        load_experiment(obj)


def test_variant_count_is_cartesian_product():
    obj = experiment_obj(grid={
        "concepts[0].edit_scale": [0, 5, 10],
        "concepts[0].warmup": [0, 15],
    })
    assert load_experiment(obj).variant_count() == 6


# -- run ----------------------------------------------------------------------

def test_minimal_run_reports_unguided_posterior():
    obj = experiment_obj(guidance={}, seeds=[0])
    output = execute_run(load_experiment(obj))
    assert len(output.rows) == 1
    row = output.rows[0]
    assert row["mean_mask_fraction"] == 0.0
    assert row["posteriors"]["left"] + row["posteriors"]["right"] == pytest.approx(1.0, abs=1e-9)


def test_run_posterior_grows_with_edit_scale():
    obj = experiment_obj(
        schedule={"steps": 20},
        seeds=list(range(8)),
        grid={"concepts[0].edit_scale": [0.0, 10.0, 20.0]},
    )
    output = execute_run(load_experiment(obj))
    means = []
    for variant in range(3):
        vals = [r["posteriors"]["right"] for r in output.rows if r["variant"] == variant]
        means.append(float(np.mean(vals)))
    assert means[0] < means[1] <= means[2] + 1e-9
    assert means[2] > 0.9


def test_run_parallel_results_match_serial():
    spec = load_experiment(experiment_obj(seeds=[0, 1, 2, 3]))
    serial = execute_run(spec, jobs=1)
    parallel = execute_run(spec, jobs=2)
    assert serial.rows == parallel.rows
    assert serial.finals == parallel.finals


# -- ablate -------------------------------------------------------------------

def test_ablate_warmup_past_end_equals_unguided_baseline():
    obj = experiment_obj(
        seeds=[0, 1, 2, 3],
        grid={"concepts[0].warmup": [0, 15], "concepts[0].edit_scale": [0.0, 6.0, 12.0]},
    )
    output = execute_ablate(load_experiment(obj))
    post = output.posterior_matrix
    disp = output.displacement_matrix
    assert post.shape == (2, 3)
    # Never-applied warmup row: every cell equals the zero-scale baseline.
    for j in range(3):
        assert abs(post[1, j] - post[0, 0]) <= 1e-12
        assert disp[1, j] <= 1e-12
    assert disp[0, 0] <= 1e-12
    assert post[0, 2] > post[0, 0]


def test_ablate_momentum_disabled_column_ignores_beta():
    obj = experiment_obj(
        seeds=[0, 1],
        guidance={"concepts": [
            {"condition": "right", "edit_scale": 8.0, "threshold": 0.7, "warmup": 5},
        ]},
        grid={"momentum_beta": [0.2, 0.8], "momentum_scale": [0.0, 0.6]},
    )
    output = execute_ablate(load_experiment(obj))
    # s_m = 0 column: identical across the beta axis.
    assert output.posterior_matrix[0, 0] == output.posterior_matrix[1, 0]
    assert output.displacement_matrix[0, 0] == output.displacement_matrix[1, 0]


def test_ablate_displacement_shrinks_with_threshold():
    obj = experiment_obj(
        seeds=[0, 1, 2, 3, 4, 5],
        grid={"concepts[0].threshold": [0.5, 0.75, 0.95],
              "concepts[0].edit_scale": [6.0, 12.0]},
    )
    output = execute_ablate(load_experiment(obj))
    lams = [0.5, 0.75, 0.95]
    for j in range(2):
        rho = spearman(lams, output.displacement_matrix[:, j])
        assert rho <= 0.0


def test_ablate_shape_requirements():
    with pytest.raises(ConfigError, match="grid"):
        execute_ablate(load_experiment(experiment_obj()))
    three = experiment_obj(grid={
        "concepts[0].edit_scale": [1.0], "concepts[0].threshold": [0.5],
        "concepts[0].warmup": [0],
    })
    with pytest.raises(ConfigError, match="2 grid axes"):
        execute_ablate(load_experiment(three))
    long_out = execute_ablate(load_experiment(three), long=True)
    assert long_out.posterior_matrix is None and len(long_out.cells) == 1
    no_concepts = experiment_obj(guidance={}, grid={
        "guidance_scale": [1.0], "momentum_scale": [0.0]})
    with pytest.raises(ConfigError, match="concept"):
        execute_ablate(load_experiment(no_concepts))


def test_ablate_parallel_matches_serial():
    spec = load_experiment(experiment_obj(
        seeds=[0, 1, 2],
        grid={"concepts[0].warmup": [0, 15], "concepts[0].edit_scale": [0.0, 8.0]},
    ))
    serial = execute_ablate(spec, jobs=1)
    parallel = execute_ablate(spec, jobs=2)
    assert np.array_equal(serial.posterior_matrix, parallel.posterior_matrix)
    assert np.array_equal(serial.displacement_matrix, parallel.displacement_matrix)


# -- diag ---------------------------------------------------------------------

def test_diag_single_gaussian_near_standard_at_noise_end():
    obj = {
        "model": {"components": [
            {"weight": 1.0, "mean": [0.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 1.0]],
             "labels": ["only"]},
        ]},
        "schedule": {"steps": 15},
        "guidance": {},
        "seeds": [3],
        "diagnostics": {"draws": 3000},
    }
    output = execute_diag(load_experiment(obj))
    assert output.step == 15
    names = [name for name, _ in output.reports]
    assert names == ["uncond", "prompt"]
    report = dict(output.reports)["uncond"]
    assert abs(report.mean) < 0.05
    assert abs(report.variance - 1.0) < 0.05


def test_diag_writes_one_report_per_conditioning():
    obj = experiment_obj(diagnostics={"step": 10, "draws": 200})
    output = execute_diag(load_experiment(obj))
    assert [name for name, _ in output.reports] == ["uncond", "prompt", "concept_0_right"]
    assert output.draws == 200 and output.step == 10


# -- spearman helper ----------------------------------------------------------

def test_spearman_known_and_degenerate():
    assert spearman([1, 2, 3], [10.0, 20.0, 30.0]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [30.0, 20.0, 10.0]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [5.0, 5.0, 5.0]) == 0.0


# -- command line -------------------------------------------------------------

def write_config(tmp_path: Path, obj) -> Path:
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(obj))
    return path


def test_cli_run_writes_tables_and_figures(tmp_path):
    config = write_config(tmp_path, experiment_obj(seeds=[0, 1]))
    runner = CliRunner()
    result = runner.invoke(main, ["run", "--config", str(config),
                                  "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert "total runs: 2" in result.output
    out = tmp_path / "out"
    for name in ("runs.csv", "finals.csv", "masks.csv", "run_report.json",
                 "finals.png", "sparsity.png", "density.png"):
        assert (out / name).exists(), name
    header = (out / "runs.csv").read_text().splitlines()[0]
    assert header.startswith("variant,seed,")
    assert "post_right" in header
    report = json.loads((out / "run_report.json").read_text())
    assert report["dimension"] == 2


def test_cli_rerun_is_byte_identical(tmp_path):
    config = write_config(tmp_path, experiment_obj(seeds=[0, 1]))
    runner = CliRunner()
    for name in ("a", "b"):
        result = runner.invoke(main, ["run", "--config", str(config),
                                      "--out", str(tmp_path / name), "--jobs",
                                      "1" if name == "a" else "2"])
        assert result.exit_code == 0, result.output
    for produced in sorted((tmp_path / "a").iterdir()):
        twin = tmp_path / "b" / produced.name
        assert produced.read_bytes() == twin.read_bytes(), produced.name


def test_cli_reports_json_syntax_position(tmp_path):
    config = tmp_path / "broken.json"
    config.write_text('{"model": \n oops}')
    result = CliRunner().invoke(main, ["run", "--config", str(config)])
    assert result.exit_code == 2
    assert "broken.json:2:" in result.output


def test_cli_reports_field_path(tmp_path):
    obj = experiment_obj()
    obj["guidance"]["concepts"][0]["threshold"] = 2.0
    config = write_config(tmp_path, obj)
    result = CliRunner().invoke(main, ["run", "--config", str(config)])
    assert result.exit_code == 2
    assert "guidance.concepts[0].threshold" in result.output


def test_cli_grid_flag_wins_over_file(tmp_path):
    obj = experiment_obj(seeds=[0], grid={"concepts[0].edit_scale": [1.0, 2.0, 3.0]})
    config = write_config(tmp_path, obj)
    result = CliRunner().invoke(main, [
        "run", "--config", str(config), "--out", str(tmp_path / "out"),
        "--grid", "concepts[0].edit_scale=0,9",
    ])
    assert result.exit_code == 0, result.output
    assert "variants: 2" in result.output


def test_cli_ablate_demands_two_axes(tmp_path):
    config = write_config(tmp_path, experiment_obj(
        grid={"concepts[0].edit_scale": [1.0]}))
    result = CliRunner().invoke(main, ["ablate", "--config", str(config),
                                       "--out", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert "2 grid axes" in result.output


def test_cli_ablate_matrix_layout(tmp_path):
    config = write_config(tmp_path, experiment_obj(
        seeds=[0, 1],
        grid={"concepts[0].warmup": [0, 15], "concepts[0].edit_scale": [0.0, 8.0]}))
    out = tmp_path / "out"
    result = CliRunner().invoke(main, ["ablate", "--config", str(config),
                                       "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = (out / "ablate_posterior.csv").read_text().splitlines()
    assert lines[0] == "concepts[0].warmup\\concepts[0].edit_scale,0.0,8.0"
    assert len(lines) == 3
    assert (out / "ablate_posterior.png").exists()
    assert (out / "ablate_cells.csv").read_text().splitlines()[0] == \
        "concepts[0].warmup,concepts[0].edit_scale,posterior,displacement"


def test_cli_seed_precedence(tmp_path):
    config = write_config(tmp_path, experiment_obj(seeds=[0]))
    runner = CliRunner()
    env_run = runner.invoke(main, ["run", "--config", str(config),
                                   "--out", str(tmp_path / "env")],
                            env={"SEGA_FORGE_SEED": "4..5"})
    assert env_run.exit_code == 0, env_run.output
    rows = (tmp_path / "env" / "runs.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["4", "5"]
    flag_run = runner.invoke(main, ["run", "--config", str(config), "--seeds", "7",
                                    "--out", str(tmp_path / "flag")],
                             env={"SEGA_FORGE_SEED": "4..5"})
    assert flag_run.exit_code == 0, flag_run.output
    rows = (tmp_path / "flag" / "runs.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["7"]


def test_cli_format_restriction(tmp_path):
    config = write_config(tmp_path, experiment_obj(seeds=[0]))
    out = tmp_path / "out"
    result = CliRunner().invoke(main, ["run", "--config", str(config),
                                       "--out", str(out), "--format", "json"])
    assert result.exit_code == 0, result.output
    assert (out / "run_report.json").exists()
    assert not (out / "runs.csv").exists()


def test_cli_diag_outputs(tmp_path):
    config = write_config(tmp_path, experiment_obj(
        seeds=[0], diagnostics={"draws": 100}))
    out = tmp_path / "out"
    result = CliRunner().invoke(main, ["diag", "--config", str(config),
                                       "--out", str(out)])
    assert result.exit_code == 0, result.output
    moments = (out / "diag_moments.csv").read_text().splitlines()
    assert len(moments) == 4  # header + uncond + prompt + one concept
    payload = json.loads((out / "diag.json").read_text())
    assert set(payload["reports"]) == {"uncond", "prompt", "concept_0_right"}
    assert (out / "diag.png").exists()
