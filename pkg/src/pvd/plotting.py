"""SVG figures for reports: scaling curves, difficulty density, ablation bars, sampling trajectories.

Output is a deterministic byte stream for identical inputs: the Agg backend,
a fixed SVG hash salt and no date metadata.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InvalidArgument  # noqa: E402

STYLE = {
    "svg.hashsalt": "pvd",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
PARADIGM_COLORS = {"parallel": "#1f77b4", "sequential": "#d62728"}


def save_svg(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _figure(ncols: int = 1, size=(4.0, 3.2)):
    with plt.rc_context(STYLE):
        return plt.subplots(1, ncols, figsize=(size[0] * ncols, size[1]), squeeze=False)


def plot_scaling(rows: Sequence[dict], path) -> Path:
    """Mask IoU and per-sample latency against the number of contour points, one line per paradigm.

    Each row needs ``paradigm``, ``n_points``, ``mask_iou`` and ``latency_ms``.
    """
    if not rows:
        raise InvalidArgument("no rows to plot")
    fig, axes = _figure(2)
    for paradigm in sorted({r["paradigm"] for r in rows}):
        sel = sorted((r for r in rows if r["paradigm"] == paradigm), key=lambda r: r["n_points"])
        n = [r["n_points"] for r in sel]
        kw = dict(marker="o", label=paradigm, color=PARADIGM_COLORS.get(paradigm))
        axes[0, 0].plot(n, [100 * r["mask_iou"] for r in sel], **kw)
        axes[0, 1].plot(n, [r["latency_ms"] for r in sel], **kw)
    for ax, label in zip(axes[0], ("mask IoU (%)", "latency per sample (ms)")):
        ax.set_xlabel("contour points")
        ax.set_ylabel(label)
        ax.set_xticks(sorted({r["n_points"] for r in rows}))
    axes[0, 0].legend(frameon=False)
    fig.tight_layout()
    return save_svg(fig, path)


def plot_density(density, path, title: str = "") -> Path:
    """Heat plot of a unit-mass (difficulty, IoU) histogram."""
    fig, axes = _figure(1, (4.2, 3.4))
    ax = axes[0, 0]
    de, ie = density.difficulty_edges, density.iou_edges
    mesh = ax.pcolormesh(de, ie, density.hist.T, cmap="viridis", shading="flat")
    fig.colorbar(mesh, ax=ax, label="fraction of samples")
    ax.axvline(0.2, color="w", lw=0.8, ls="--")
    ax.set_xlabel("difficulty")
    ax.set_ylabel("mask IoU")
    hard = "n/a" if np.isnan(density.hard_mean_iou) else f"{density.hard_mean_iou:.3f}"
    ax.set_title(f"{title}  hard mean IoU {hard} (n={density.hard_count})".strip(), fontsize=8)
    fig.tight_layout()
    return save_svg(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    """Grouped bars: one group per variant, one bar per metric (percent)."""
    if not rows:
        raise InvalidArgument("no rows to plot")
    metrics = [k for k in rows[0] if k != "variant"]
    fig, axes = _figure(1, (5.0, 3.2))
    ax = axes[0, 0]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    for k, m in enumerate(metrics):
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, [r[m] for r in rows], width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([r["variant"] for r in rows])
    ax.set_ylabel("percent")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    return save_svg(fig, path)


def plot_trajectory(contours: Sequence[np.ndarray], path, gt_polygon=None, labels: Sequence[str] | None = None) -> Path:
    """Overlay the contour decoded at every sampling step, light to dark, over the ground truth."""
    if not len(contours):
        raise InvalidArgument("empty trajectory")
    fig, axes = _figure(1, (3.6, 3.6))
    ax = axes[0, 0]
    if gt_polygon is not None:
        g = np.asarray(getattr(gt_polygon, "vertices", gt_polygon))
        ax.fill(g[:, 1], g[:, 0], color="0.85", lw=0, label="ground truth")
    cmap = plt.get_cmap("plasma")
    for k, c in enumerate(contours):
        c = np.asarray(c)
        closed = np.vstack([c, c[:1]])
        lab = labels[k] if labels is not None else f"step {k}"
        ax.plot(closed[:, 1], closed[:, 0], color=cmap(k / max(len(contours) - 1, 1)), lw=1.0, marker=".",
                ms=2, label=lab)
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_aspect("equal")
    ax.set_xlabel("j")
    ax.set_ylabel("i")
    ax.legend(frameon=False, fontsize=6, loc="lower right")
    fig.tight_layout()
    return save_svg(fig, path)


def plot_report(report, path) -> Path:
    """Summary of one evaluation: IoU histogram and the difficulty density."""
    from .evaluation import difficulty_density

    d = difficulty_density(report.records)
    fig, axes = _figure(2, (4.0, 3.2))
    iou = [r["iou"] for r in report.records]
    axes[0, 0].hist(iou, bins=np.linspace(0, 1, 21), color="#1f77b4")
    axes[0, 0].set_xlabel("mask IoU")
    axes[0, 0].set_ylabel("samples")
    axes[0, 0].set_title(f"mean {report.mask_iou_mean:.3f}  det acc {report.det_acc:.3f}", fontsize=8)
    mesh = axes[0, 1].pcolormesh(d.difficulty_edges, d.iou_edges, d.hist.T, cmap="viridis", shading="flat")
    fig.colorbar(mesh, ax=axes[0, 1])
    axes[0, 1].set_xlabel("difficulty")
    axes[0, 1].set_ylabel("mask IoU")
    fig.tight_layout()
    return save_svg(fig, path)
