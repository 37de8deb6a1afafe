"""Report figures written next to the CSV outputs.

All figures go through the Agg backend with fixed size, DPI and no
metadata, so repeated runs produce identical PNG bytes.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import GaussianFit  # noqa: E402

__all__ = ["STYLE", "plot_history", "plot_profile", "plot_asf", "plot_compare", "save_figure"]

STYLE = {
    "figure.figsize": (4.0, 3.0),
    "figure.dpi": 100,
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "lines.linewidth": 1.0,
    "lines.markersize": 3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
}


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path, title: str = "") -> Path:
    """Objective and regularisation weight against iteration."""
    k = np.array([h.k for h in history])
    f = np.array([h.f for h in history])
    lam = np.array([h.lam for h in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(k, np.maximum(f, np.finfo(float).tiny), "o-", label="objective")
        ax.set_xlabel("iteration")
        ax.set_ylabel("f(x)")
        if np.any(lam > 0):
            ax2 = ax.twinx()
            ax2.plot(k, lam, "s--", color="C1", label="lambda")
            ax2.set_ylabel("lambda")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return save_figure(fig, path)


def plot_profile(profiles: Mapping[int, np.ndarray], fits: Mapping[int, GaussianFit], spacing: float,
                 path, title: str = "") -> Path:
    """Plane profiles per checkpoint with their Gaussian fits."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for n, (cp, s) in enumerate(sorted(profiles.items())):
            t = np.arange(len(s))
            ax.plot(t * spacing, s, "o", color=f"C{n}", label=f"{cp} it")
            fit = fits.get(cp)
            if fit is not None and fit.ok:
                tt = np.linspace(0, len(s) - 1, 200)
                g = fit.amplitude * np.exp(-0.5 * ((tt - fit.mean) / fit.sd) ** 2) + fit.offset
                ax.plot(tt * spacing, g, "-", color=f"C{n}")
        ax.set_xlabel("y (mm)")
        ax.set_ylabel("attenuation (1/mm)")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return save_figure(fig, path)


def plot_asf(curves: Mapping[int, np.ndarray], focus: int, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for n, (cp, a) in enumerate(sorted(curves.items())):
            z = np.arange(len(a)) - focus
            ax.plot(z, a, "o-", color=f"C{n}", label=f"{cp} it")
        ax.axvline(0, color="0.7", lw=0.5)
        ax.set_xlabel("slice offset from focus")
        ax.set_ylabel("ASF")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return save_figure(fig, path)


def plot_compare(values: Mapping[str, Mapping[int, float]], path, ylabel: str = "CNR",
                 title: str = "") -> Path:
    """One line per solver across checkpoints; missing cells are skipped."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for n, (solver, row) in enumerate(sorted(values.items())):
            pts = sorted((cp, v) for cp, v in row.items() if v is not None and math.isfinite(v))
            if pts:
                cp, v = zip(*pts)
                ax.plot(cp, v, "o-", color=f"C{n}", label=solver)
        ax.set_xlabel("checkpoint (iterations)")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return save_figure(fig, path)
