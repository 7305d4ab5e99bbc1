"""Figures for the report paths of the command line tool.

All functions write a file and close their figure; nothing is shown
interactively (the Agg backend is selected on import).
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .align import directed_pairs, symmetric_pairs  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "dsgeom",   # stable ids in svg output
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def alignment_scatter(D, P, path, directed=False, result=None):
    """Distance against transfer error, one point per (ordered or unordered) pair."""
    x, y = directed_pairs(D, P) if directed else symmetric_pairs(D, P)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.0))
        ax.scatter(x, y, s=12, alpha=0.7, edgecolor="none")
        if x.size >= 2 and np.ptp(x) > 0:
            slope, icpt = np.polyfit(x, y, 1)
            xs = np.linspace(x.min(), x.max(), 50)
            ax.plot(xs, icpt + slope * xs, lw=1, color="0.3")
        ax.set_xlabel(f"distance ({D.metric_tag})")
        ax.set_ylabel("transfer error" + ("" if directed else " (symmetrized)"))
        if result is not None:
            ax.set_title(f"r={result.pearson:.3f}  rho={result.spearman:.3f}  tau={result.kendall:.3f}", fontsize=8)
        return _save(fig, path)


def loss_curves(records, path):
    """Per-term training losses against optimizer step (log scale)."""
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for name in ("total", "list", "cons", "corr", "distill"):
            vals = np.array([r[name] for r in records], dtype=float)
            if np.any(vals > 0):
                ax.plot(steps, np.maximum(vals, 1e-12), lw=1.2 if name == "total" else 0.8, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def sweep_plot(rows, path, stat="spearman"):
    """Mean +/- std of the alignment statistic against corruption level, one line per mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        for mode in sorted({r["mode"] for r in rows}):
            for key, ls in (("sym", "-"), ("dir", "--")):
                sel = [r for r in rows if r["mode"] == mode and r.get(f"{key}_{stat}_mean") is not None]
                if not sel:
                    continue
                sel.sort(key=lambda r: r["level"])
                lv = [r["level"] for r in sel]
                mu = np.array([r[f"{key}_{stat}_mean"] for r in sel])
                sd = np.array([r[f"{key}_{stat}_std"] for r in sel])
                ax.errorbar(lv, mu, yerr=sd, ls=ls, marker="o", ms=3, capsize=2, label=f"{mode} ({key})")
        ax.set_xlabel("corruption level")
        ax.set_ylabel(stat)
        ax.legend(frameon=False)
        return _save(fig, path)


def matrix_heatmap(values, ids, path, title=None, cmap="viridis"):
    values = np.asarray(values, dtype=float)
    n = len(ids)
    with plt.rc_context(STYLE):
        size = min(8.0, 1.5 + 0.3 * n)
        fig, ax = plt.subplots(figsize=(size, size * 0.85))
        im = ax.imshow(values, cmap=cmap)
        fig.colorbar(im, ax=ax, shrink=0.8)
        if n <= 40:
            ax.set_xticks(range(n), ids, rotation=90)
            ax.set_yticks(range(n), ids)
        ax.set_xlabel("target")
        ax.set_ylabel("source")
        if title:
            ax.set_title(title)
        return _save(fig, path)
