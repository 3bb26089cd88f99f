"""Experiment execution behind the command-line harness.

Turns a validated experiment document into deterministic tables: per-seed
guided runs over an optional parameter grid, two-axis ablation matrices,
and estimate-distribution reports.  All randomness flows from the config
seed list; workers never write files, and merged output depends only on
the config, so any worker count produces identical bytes.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.stats

from .config import (
    ConfigError,
    apply_overrides,
    estimator_from_config,
    guidance_from_config,
    schedule_from_config,
    seeds_from_config,
    validate_config,
)
from .diagnostics import DistributionReport, distribution_report, mask_report
from .diffusion import run_guided
from .guidance import GuidanceConfig
from .tensors import Latent, Rng

__all__ = [
    "AblateOutput",
    "DiagOutput",
    "ExperimentSpec",
    "RunOutput",
    "execute_ablate",
    "execute_diag",
    "execute_run",
    "load_experiment",
    "spearman",
]

_FINAL_COORD_LIMIT = 16


@dataclass(frozen=True)
class ExperimentSpec:
    """Validated experiment document plus its canonical JSON text."""

    raw: dict
    text: str

    @property
    def seeds(self) -> list[int]:
        return seeds_from_config(self.raw["seeds"])

    @property
    def grid_axes(self) -> list[tuple[str, list]]:
        return [(k, list(v)) for k, v in self.raw.get("grid", {}).items()]

    @property
    def formats(self) -> tuple[str, ...]:
        out = self.raw.get("outputs", {})
        return tuple(out.get("formats", ("csv", "json")))

    @property
    def directory(self) -> str | None:
        return self.raw.get("outputs", {}).get("directory")

    @property
    def diag_step(self) -> int:
        return self.raw.get("diagnostics", {}).get("step", self.raw["schedule"]["steps"])

    @property
    def diag_draws(self) -> int:
        return self.raw.get("diagnostics", {}).get("draws", 2000)

    def variant_count(self) -> int:
        count = 1
        for _, values in self.grid_axes:
            count *= len(values)
        return count


def load_experiment(obj: dict) -> ExperimentSpec:
    """Validate a parsed experiment document and pre-resolve its grid paths."""
    validate_config(obj, "experiment")
    guidance = guidance_from_config(obj.get("guidance", {}))
    for path, values in obj.get("grid", {}).items():
        apply_overrides(guidance, {path: values[0]})
    steps = obj["schedule"]["steps"]
    diag = obj.get("diagnostics", {})
    if diag.get("step", 0) > steps:
        raise ConfigError("diagnostics.step", f"must be at most schedule.steps ({steps})")
    # Key order is preserved: grid axis order is meaningful for matrix layout.
    text = json.dumps(obj, separators=(",", ":"))
    return ExperimentSpec(raw=obj, text=text)


@lru_cache(maxsize=8)
def _runtime(spec_text: str):
    """Build runnable objects once per worker process and spec."""
    obj = json.loads(spec_text)
    schedule = schedule_from_config(obj["schedule"])
    estimator = estimator_from_config(obj["model"], schedule)
    guidance = guidance_from_config(obj.get("guidance", {}))
    axes = [(k, tuple(v)) for k, v in obj.get("grid", {}).items()]
    variants = []
    for combo in itertools.product(*(values for _, values in axes)):
        label = tuple(zip((k for k, _ in axes), combo))
        variants.append((label, apply_overrides(guidance, dict(label))))
    return estimator, schedule, guidance, variants


def _trajectory_stats(run) -> tuple[float, float, float]:
    points = np.stack([z.data for z in run.trajectory])
    hops = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return (
        float(np.linalg.norm(points[0])),
        float(hops.sum()),
        float(np.linalg.norm(points[-1])),
    )


def _mean_mask_fraction(state) -> float:
    fractions = [
        np.count_nonzero(mask) / mask.size for step in state.mask_log for mask in step
    ]
    return float(np.mean(fractions)) if fractions else 0.0


# -- run command --------------------------------------------------------------

@dataclass(frozen=True)
class RunOutput:
    tags: tuple[str, ...]
    dimension: int
    axis_names: tuple[str, ...]
    variants: tuple[tuple, ...]
    rows: tuple[dict, ...]
    finals: tuple[dict, ...]
    mask_reports: tuple[dict, ...]
    distributions: tuple[dict, ...]


def _run_seed_task(payload: tuple[str, int]) -> list[dict]:
    spec_text, seed = payload
    estimator, schedule, _, variants = _runtime(spec_text)
    results = []
    for index, (label, config) in enumerate(variants):
        run = run_guided(estimator, schedule, config, seed)
        initial, path_length, final_norm = _trajectory_stats(run)
        results.append({
            "variant": index,
            "label": label,
            "seed": seed,
            "initial_norm": initial,
            "path_length": path_length,
            "final_norm": final_norm,
            "mean_mask_fraction": _mean_mask_fraction(run.state),
            "posteriors": {tag: estimator.label_posterior(run.final, tag)
                           for tag in estimator.tags},
            "final": run.final.data.tolist(),
        })
    return results


def _map_seeds(task, spec: ExperimentSpec, jobs: int) -> list:
    payloads = [(spec.text, seed) for seed in spec.seeds]
    if jobs <= 1:
        return [task(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(task, payloads))


def execute_run(spec: ExperimentSpec, jobs: int = 1) -> RunOutput:
    estimator, schedule, _, variants = _runtime(spec.text)
    per_seed = _map_seeds(_run_seed_task, spec, jobs)
    axis_names = tuple(name for name, _ in spec.grid_axes)
    rows, finals = [], []
    finals_by_variant: list[list[list[float]]] = [[] for _ in variants]
    for index in range(len(variants)):
        for seed_results in per_seed:
            entry = seed_results[index]
            rows.append(entry)
            finals_by_variant[index].append(entry["final"])
            finals.append({"variant": index, "seed": entry["seed"], "final": entry["final"]})
    mask_reports = []
    distributions = []
    first_seed = spec.seeds[0]
    for index, (label, config) in enumerate(variants):
        run = run_guided(estimator, schedule, config, first_seed)
        report = mask_report(run.state)
        mask_reports.append({"variant": index, "report": report.to_json(),
                             "series": list(report.series_rows())})
        flat_finals = np.asarray(finals_by_variant[index]).ravel()
        gamma = np.concatenate([g.data for g in run.state.gamma_log])
        entry = {"variant": index}
        if flat_finals.size >= 2:
            entry["final_values"] = distribution_report(flat_finals).to_json()
        entry["guidance_values"] = distribution_report(gamma).to_json()
        distributions.append(entry)
    return RunOutput(
        tags=estimator.tags,
        dimension=estimator.dimension,
        axis_names=axis_names,
        variants=tuple(label for label, _ in variants),
        rows=tuple(rows),
        finals=tuple(finals),
        mask_reports=tuple(mask_reports),
        distributions=tuple(distributions),
    )


# -- ablate command -----------------------------------------------------------

@dataclass(frozen=True)
class AblateOutput:
    axis_names: tuple[str, ...]
    axis_values: tuple[tuple, ...]
    cells: tuple[dict, ...]
    posterior_matrix: np.ndarray | None
    displacement_matrix: np.ndarray | None


def _baseline_key(config: GuidanceConfig) -> tuple:
    return (config.prompt_condition, config.guidance_scale,
            config.momentum_scale, config.momentum_beta)


def _ablate_seed_task(payload: tuple[str, int]) -> list[tuple[float, float]]:
    spec_text, seed = payload
    estimator, schedule, _, variants = _runtime(spec_text)
    baselines: dict[tuple, Latent] = {}
    cells = []
    for label, config in variants:
        key = _baseline_key(config)
        if key not in baselines:
            emptied = dataclasses.replace(config, concepts=())
            baselines[key] = run_guided(
                estimator, schedule, emptied, seed, record=False, keep_trajectory=False).final
        run = run_guided(estimator, schedule, config, seed,
                         record=False, keep_trajectory=False)
        target = config.concepts[0].condition
        posterior = estimator.label_posterior(run.final, target)
        displacement = float(np.linalg.norm(run.final.data - baselines[key].data))
        cells.append((posterior, displacement))
    return cells


def execute_ablate(spec: ExperimentSpec, jobs: int = 1, long: bool = False) -> AblateOutput:
    axes = spec.grid_axes
    if not axes:
        raise ConfigError("grid", "ablate needs a parameter grid")
    if len(axes) != 2 and not long:
        raise ConfigError("grid", f"matrix output needs exactly 2 grid axes, got {len(axes)}; "
                          "pass long output for other shapes")
    base_guidance = guidance_from_config(spec.raw.get("guidance", {}))
    if not base_guidance.concepts:
        raise ConfigError("guidance.concepts", "ablate needs at least one concept")
    per_seed = _map_seeds(_ablate_seed_task, spec, jobs)
    _, _, _, variants = _runtime(spec.text)
    seeds = spec.seeds
    cells = []
    for index, (label, _) in enumerate(variants):
        posterior = sum(seed_cells[index][0] for seed_cells in per_seed) / len(seeds)
        displacement = sum(seed_cells[index][1] for seed_cells in per_seed) / len(seeds)
        cells.append({"label": label, "posterior": posterior, "displacement": displacement})
    posterior_matrix = displacement_matrix = None
    if len(axes) == 2:
        shape = (len(axes[0][1]), len(axes[1][1]))
        posterior_matrix = np.array([c["posterior"] for c in cells]).reshape(shape)
        displacement_matrix = np.array([c["displacement"] for c in cells]).reshape(shape)
    return AblateOutput(
        axis_names=tuple(name for name, _ in axes),
        axis_values=tuple(tuple(values) for _, values in axes),
        cells=tuple(cells),
        posterior_matrix=posterior_matrix,
        displacement_matrix=displacement_matrix,
    )


# -- diag command -------------------------------------------------------------

@dataclass(frozen=True)
class DiagOutput:
    step: int
    draws: int
    reports: tuple[tuple[str, DistributionReport], ...]


def execute_diag(spec: ExperimentSpec) -> DiagOutput:
    estimator, schedule, guidance, _ = _runtime(spec.text)
    t = spec.diag_step
    draws = spec.diag_draws
    rng = Rng(spec.seeds[0])
    data = estimator.sample_data(rng, draws)
    noise = rng.normals(draws * estimator.dimension).reshape(draws, estimator.dimension)
    alpha = float(schedule.alphas[t])
    omega = float(schedule.omegas[t])
    latents = alpha * data + omega * noise
    conditionings: list[tuple[str, str | None]] = [
        ("uncond", None), ("prompt", guidance.prompt_condition),
    ]
    for i, concept in enumerate(guidance.concepts):
        conditionings.append((f"concept_{i}_{concept.condition}", concept.condition))
    reports = []
    for name, condition in conditionings:
        values = np.concatenate([
            estimator.estimate(Latent(row.copy(), (estimator.dimension,)), t, condition).data
            for row in latents
        ])
        reports.append((name, distribution_report(values)))
    return DiagOutput(step=t, draws=draws, reports=tuple(reports))


# -- shared metrics -----------------------------------------------------------

def spearman(xs, ys) -> float:
    """Spearman rank correlation; 0.0 for constant input instead of NaN."""
    if len(set(xs)) < 2 or len(set(float(y) for y in ys)) < 2:
        return 0.0
    rho = scipy.stats.spearmanr(xs, ys).statistic
    return float(rho)
