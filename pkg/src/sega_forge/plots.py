"""Figure rendering for the harness: scatter, series, density, heatmap.

Every figure is written head-less with fixed size and stripped metadata,
so repeated runs of the same config produce identical files.  Figures
accompany the delimited output; the data files stay the deliverable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_density",
    "save_finals_scatter",
    "save_heatmap",
    "save_sparsity_series",
]

_SAVE_ARGS = {"dpi": 110, "metadata": {"Software": None}}


def save_finals_scatter(path, finals, labels=None, title="final samples") -> None:
    points = np.asarray(finals, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    if points.ndim == 2 and points.shape[1] >= 2:
        if labels:
            order = sorted(set(labels))
            for tag in order:
                mask = [l == tag for l in labels]
                ax.scatter(points[mask, 0], points[mask, 1], s=14, alpha=0.75, label=tag)
            ax.legend(frameon=False, fontsize=8)
        else:
            ax.scatter(points[:, 0], points[:, 1], s=14, alpha=0.75)
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
    else:
        ax.hist(points.ravel(), bins=40)
        ax.set_xlabel("x0")
        ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_ARGS)
    plt.close(fig)


def save_sparsity_series(path, series, title="mask sparsity per step") -> None:
    width = max((len(step) for step in series), default=0)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for concept in range(width):
        xs = [t for t, step in enumerate(series) if len(step) > concept]
        ys = [step[concept] for step in series if len(step) > concept]
        ax.plot(xs, ys, marker=".", label=f"concept {concept}")
    ax.set_xlabel("step")
    ax.set_ylabel("nonzero fraction")
    ax.set_ylim(bottom=0.0)
    if width:
        ax.legend(frameon=False, fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_ARGS)
    plt.close(fig)


def save_density(path, named_curves, title="value density") -> None:
    """named_curves: iterable of (name, grid, density)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for name, grid, density in named_curves:
        ax.plot(grid, density, label=name)
    ax.set_xlabel("value")
    ax.set_ylabel("density")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_ARGS)
    plt.close(fig)


def save_heatmap(path, matrix, row_name, row_values, col_name, col_values, title) -> None:
    grid = np.asarray(matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    image = ax.imshow(grid, origin="upper", aspect="auto", cmap="viridis")
    fig.colorbar(image, ax=ax, shrink=0.85)
    ax.set_xticks(range(len(col_values)), [str(v) for v in col_values], fontsize=8)
    ax.set_yticks(range(len(row_values)), [str(v) for v in row_values], fontsize=8)
    ax.set_xlabel(col_name)
    ax.set_ylabel(row_name)
    if grid.size <= 64:
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                ax.text(j, i, f"{grid[i, j]:.3g}", ha="center", va="center",
                        fontsize=7, color="white")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_ARGS)
    plt.close(fig)
