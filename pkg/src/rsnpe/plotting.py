"""Figure output for the CLI: posterior corner plots and SBC rank histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from .datagen import PARAM_NAMES, PriorSpec  # noqa: E402
from .inference import load_samples  # noqa: E402

LABELS = {"eps": r"$\varepsilon$", "sigma": r"$\sigma$ [m]", "slope": "$m$"}
KDE_POINTS = 2000
GRID = 80


def _kde(data, seed):
    if len(data.T) > KDE_POINTS:
        keep = np.random.default_rng(seed).choice(len(data.T), KDE_POINTS, replace=False)
        data = data[:, keep]
    try:
        return gaussian_kde(data)
    except np.linalg.LinAlgError:
        return None  # degenerate samples: skip the contour


def _label(stem: str) -> str:
    if "_eps" in stem:
        return r"$\varepsilon_{ref}$ = " + stem.rsplit("_eps", 1)[1]
    return stem


def _levels(density, masses=(0.9, 0.5)):
    """Density thresholds enclosing the given probability masses."""
    flat = np.sort(density.ravel())[::-1]
    cum = np.cumsum(flat) / flat.sum()
    return sorted(flat[min(np.searchsorted(cum, m), len(flat) - 1)] for m in masses)


def corner_plot(sample_paths, path, prior: PriorSpec | None = None) -> Path:
    """2-D KDE contours (50 % and 90 % mass) below the diagonal and 1-D KDE marginals on it.

    Each CSV in ``sample_paths`` becomes one colour, labelled by the reference
    permittivity encoded in its file name.
    """
    path = Path(path)
    dim = len(PARAM_NAMES)
    fig, axes = plt.subplots(dim, dim, figsize=(2.6 * dim, 2.6 * dim))
    sets = [(_label(Path(p).stem), load_samples(p)) for p in sample_paths]
    if prior is not None:
        lo, hi = prior.low, prior.high
    else:
        allx = np.vstack([s for _, s in sets])
        lo, hi = allx.min(axis=0), allx.max(axis=0)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]

    for k, (label, samples) in enumerate(sets):
        c = colors[k % len(colors)]
        for i in range(dim):
            grid = np.linspace(lo[i], hi[i], GRID)
            kde = _kde(samples[:, i][None, :], k)
            ax = axes[i, i]
            if kde is not None:
                ax.plot(grid, kde(grid[None, :]), color=c, label=label)
            else:
                ax.axvline(samples[0, i], color=c, label=label)
            for j in range(i):
                kde2 = _kde(samples[:, [j, i]].T, k)
                if kde2 is None:
                    continue
                gx, gy = np.meshgrid(np.linspace(lo[j], hi[j], GRID), grid)
                dens = kde2(np.vstack([gx.ravel(), gy.ravel()])).reshape(gx.shape)
                levels = _levels(dens)
                if levels[0] < levels[1]:
                    axes[i, j].contour(gx, gy, dens, levels=levels, colors=[c], linewidths=[0.8, 1.4])

    for i in range(dim):
        for j in range(dim):
            ax = axes[i, j]
            if j > i:
                ax.set_axis_off()
                continue
            ax.set_xlim(lo[j], hi[j])
            if j < i:
                ax.set_ylim(lo[i], hi[i])
            else:
                ax.set_yticks([])
            if i == dim - 1:
                ax.set_xlabel(LABELS[PARAM_NAMES[j]])
            if j == 0 and i > 0:
                ax.set_ylabel(LABELS[PARAM_NAMES[i]])
    axes[0, 0].legend(fontsize="small", loc="upper left", bbox_to_anchor=(1.05, 1.0))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def rank_histograms(ranks_csv, L: int, path, n_bins: int = 20) -> Path:
    """One histogram per parameter with the 99 % band expected under uniform ranks."""
    from scipy.stats import binom

    path = Path(path)
    ranks = np.loadtxt(ranks_csv, delimiter=",", skiprows=1, ndmin=2)
    n_bins = min(n_bins, L + 1)
    edges = np.linspace(0, L + 1, n_bins + 1)
    n = len(ranks)
    lo, hi = binom.ppf([0.005, 0.995], n, 1 / n_bins)
    fig, axes = plt.subplots(1, ranks.shape[1], figsize=(3.2 * ranks.shape[1], 2.8))
    for d, ax in enumerate(np.atleast_1d(axes)):
        ax.axhspan(lo, hi, color="0.85", zorder=0)
        ax.axhline(n / n_bins, color="0.5", lw=0.8)
        ax.hist(ranks[:, d], bins=edges, histtype="stepfilled", alpha=0.8)
        ax.set_xlabel(f"rank of {PARAM_NAMES[d]}")
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
