"""Numerical characterization of value distributions and mask structure.

Two report types cover the two diagnostic surfaces of a guided run: the
scalar-value distribution of noise estimates or guidance vectors
(``distribution_report``), and the sparsity and overlap structure of the
per-concept selection masks (``mask_report``).  Both are plain frozen
records with ``to_json`` plus row iterators for delimited output, so the
command-line harness and the steering service can serialize them without
reaching into internals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .guidance import GuidanceState
from .tensors import Latent

__all__ = [
    "DistributionReport",
    "MaskReport",
    "distribution_report",
    "mask_report",
]

HISTOGRAM_BINS = 64
KDE_GRID_POINTS = 512
# Data points per block in the kernel accumulation; keeps the kernel matrix
# bounded at KDE_GRID_POINTS x _KDE_CHUNK regardless of sample count.
_KDE_CHUNK = 4096


def _flat_values(values) -> np.ndarray:
    if isinstance(values, Latent):
        return values.data
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size and not np.isfinite(arr).all():
        raise ValueError("values must be finite")
    return arr


@dataclass(frozen=True)
class DistributionReport:
    """Moments, histogram, and kernel-density estimate of a value sample.

    ``skewness`` and ``excess_kurtosis`` are the population forms
    (third and fourth standardized central moments, the latter minus 3)
    and are defined as 0.0 for a constant sample.  The density is
    renormalized so its trapezoid integral over the grid is exactly 1.
    """

    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    bin_edges: np.ndarray
    counts: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    sample_count: int

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "skewness": self.skewness,
            "excess_kurtosis": self.excess_kurtosis,
            "bandwidth": self.bandwidth,
            "sample_count": self.sample_count,
            "histogram": {
                "bin_edges": self.bin_edges.tolist(),
                "counts": self.counts.tolist(),
            },
            "kde": {
                "grid": self.grid.tolist(),
                "density": self.density.tolist(),
            },
        }

    def histogram_rows(self):
        """Yield (index, left_edge, right_edge, count) per bin."""
        for i in range(self.counts.size):
            yield i, float(self.bin_edges[i]), float(self.bin_edges[i + 1]), int(self.counts[i])

    def kde_rows(self):
        """Yield (index, point, density) per grid point."""
        for i in range(self.grid.size):
            yield i, float(self.grid[i]), float(self.density[i])


def _population_moments(flat: np.ndarray) -> tuple[float, float, float, float]:
    mean = float(flat.mean())
    centered = flat - mean
    variance = float(np.mean(centered**2))
    if variance == 0.0:
        return mean, 0.0, 0.0, 0.0
    sigma = math.sqrt(variance)
    skewness = float(np.mean(centered**3)) / sigma**3
    kurtosis = float(np.mean(centered**4)) / variance**2 - 3.0
    return mean, variance, skewness, kurtosis


def _silverman_bandwidth(sigma: float, mean: float, n: int) -> float:
    if sigma == 0.0:
        # Degenerate sample: any positive width gives a single bump.
        return 1e-3 * max(1.0, abs(mean))
    return 1.06 * sigma * n ** (-1.0 / 5.0)


def _kde(flat: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    norm = 1.0 / (flat.size * bandwidth * math.sqrt(2.0 * math.pi))
    accum = np.zeros(grid.size)
    for start in range(0, flat.size, _KDE_CHUNK):
        block = flat[start:start + _KDE_CHUNK]
        sq = ((grid[:, None] - block[None, :]) / bandwidth) ** 2
        accum += np.exp(-0.5 * sq).sum(axis=1)
    return norm * accum


def distribution_report(values, kde_bandwidth: float | None = None) -> DistributionReport:
    """Summarize a flat value sample; needs at least two values.

    The kernel-density grid spans [min - 3h, max + 3h] with h the
    bandwidth (Silverman's rule by default), and the returned density is
    scaled so its trapezoid integral over that grid is exactly 1: the raw
    Gaussian-kernel estimate leaks the tail mass beyond the 3h margin,
    which for small samples exceeds the integral tolerance this report
    promises.
    """
    flat = _flat_values(values)
    if flat.size < 2:
        raise ValueError("distribution_report needs at least 2 values")
    if kde_bandwidth is not None:
        if not (isinstance(kde_bandwidth, (int, float)) and not isinstance(kde_bandwidth, bool)
                and math.isfinite(kde_bandwidth) and kde_bandwidth > 0):
            raise ValueError("kde_bandwidth must be a positive finite number")
    mean, variance, skewness, kurtosis = _population_moments(flat)
    counts, bin_edges = np.histogram(flat, bins=HISTOGRAM_BINS)
    bandwidth = float(kde_bandwidth) if kde_bandwidth is not None else _silverman_bandwidth(
        math.sqrt(variance), mean, flat.size)
    lo = float(flat.min()) - 3.0 * bandwidth
    hi = float(flat.max()) + 3.0 * bandwidth
    grid = np.linspace(lo, hi, KDE_GRID_POINTS)
    density = _kde(flat, grid, bandwidth)
    density = density / np.trapezoid(density, grid)
    return DistributionReport(
        mean=mean,
        variance=variance,
        skewness=skewness,
        excess_kurtosis=kurtosis,
        bin_edges=bin_edges,
        counts=counts,
        grid=grid,
        density=density,
        bandwidth=bandwidth,
        sample_count=int(flat.size),
    )


@dataclass(frozen=True)
class MaskReport:
    """Sparsity and overlap structure of recorded selection masks.

    ``per_step_series`` holds one tuple per recorded step with the
    nonzero fraction of each concept's mask at that step.
    ``support_overlap`` is the square Jaccard matrix between concepts,
    each entry averaged over the steps where both concepts were present.
    """

    nonzero_fraction: float
    support_overlap: np.ndarray
    per_step_series: tuple[tuple[float, ...], ...]

    def to_json(self) -> dict:
        return {
            "nonzero_fraction": self.nonzero_fraction,
            "support_overlap": self.support_overlap.tolist(),
            "per_step_series": [list(step) for step in self.per_step_series],
        }

    def series_rows(self):
        """Yield (step, concept, fraction) per recorded mask."""
        for t, step in enumerate(self.per_step_series):
            for i, fraction in enumerate(step):
                yield t, i, fraction


def _jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


def mask_report(state: GuidanceState) -> MaskReport:
    """Aggregate the selection masks recorded over a run's steps."""
    log = state.mask_log
    if not log:
        raise ValueError("state holds no recorded masks; run with record=True")
    series = tuple(
        tuple(float(np.count_nonzero(mask) / mask.size) for mask in step) for step in log
    )
    all_fractions = [f for step in series for f in step]
    nonzero = float(np.mean(all_fractions)) if all_fractions else 0.0
    width = max(len(step) for step in log)
    overlap = np.zeros((width, width))
    for i in range(width):
        for j in range(width):
            shared = [
                _jaccard(step[i], step[j]) for step in log if len(step) > max(i, j)
            ]
            overlap[i, j] = float(np.mean(shared)) if shared else 0.0
    return MaskReport(
        nonzero_fraction=nonzero,
        support_overlap=overlap,
        per_step_series=series,
    )
