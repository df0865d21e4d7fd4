"""Matplotlib figure emission: every report plot is rendered to a standalone SVG.

Figures are deliberately plain (single axes, labeled, legend when multiple
series) and numeric annotations use 6 significant digits. The Agg backend is
forced so the harness works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["emit_plot", "line_plot", "histogram_plot", "trajectory_overlay", "fmt6"]

_RC = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 10,
    "font.size": 10,
    "legend.fontsize": 9,
    "svg.fonttype": "none",
}


def fmt6(x: float) -> str:
    """Numbers in labels and annotations carry 6 significant digits."""
    return format(float(x), ".6g")


def _save(fig, path) -> str:
    path = str(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def line_plot(series, path, xlabel: str = "", ylabel: str = "", title: str = "",
              logx: bool = False, logy: bool = False, annotations=None) -> str:
    """Plot (label, x, y) series on shared axes and write an SVG.

    Args:
        series: iterable of (label, x, y) triples; at least one required.
        annotations: optional list of strings stacked in the top-left corner.
    """
    series = list(series)
    if not series:
        raise ValueError("line_plot requires at least one series")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, x, y in series:
            x = np.atleast_1d(x)
            y = np.atleast_1d(y)
            marker = "o" if x.size <= 32 else None
            ax.plot(x, y, marker=marker, label=str(label))
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(series) > 1 or any(str(lbl) for lbl, _, _ in series):
            ax.legend()
        for k, text in enumerate(annotations or []):
            ax.text(0.02, 0.98 - 0.07 * k, text, transform=ax.transAxes,
                    ha="left", va="top")
        return _save(fig, path)


def histogram_plot(samples, path, density=None, bins: int = 80, xlabel: str = "",
                   title: str = "") -> str:
    """Histogram of scalar samples with an optional analytic density overlay."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("histogram_plot requires samples")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.hist(samples, bins=bins, density=True, alpha=0.55, label="samples")
        if density is not None:
            xs, ys = density
            ax.plot(xs, ys, "k-", lw=1.5, label="target density")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("density")
        ax.set_title(title)
        ax.legend()
        ax.text(0.02, 0.98, f"mean {fmt6(samples.mean())}  m2 {fmt6(np.mean(samples**2))}",
                transform=ax.transAxes, ha="left", va="top")
        return _save(fig, path)


def trajectory_overlay(path, demos=None, planned=None, executed=None, obstacle=None,
                       goal=None, goal_radius: float | None = None, title: str = "") -> str:
    """2D scene overlay: demonstrations, planned path, executed path, obstacle, goal."""
    if demos is None and planned is None and executed is None:
        raise ValueError("trajectory_overlay requires at least one path to draw")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 5.0))
        for k, demo in enumerate(demos or []):
            demo = np.asarray(demo)
            ax.plot(demo[:, 0], demo[:, 1], color="0.75", lw=0.7,
                    label="demonstrations" if k == 0 else None, zorder=1)
        if obstacle is not None:
            center, radius = obstacle
            ax.add_patch(plt.Circle(tuple(center), radius, color="tab:red",
                                    alpha=0.35, label="obstacle", zorder=2))
        if goal is not None:
            ax.plot([goal[0]], [goal[1]], marker="*", ms=14, color="tab:green",
                    ls="none", label="goal", zorder=4)
            if goal_radius:
                ax.add_patch(plt.Circle(tuple(goal), goal_radius, fill=False,
                                        color="tab:green", ls="--", lw=0.8, zorder=3))
        if planned is not None:
            planned = np.asarray(planned)
            ax.plot(planned[:, 0], planned[:, 1], "b--", lw=1.4, label="planned", zorder=5)
        if executed is not None:
            executed = np.asarray(executed)
            ax.plot(executed[:, 0], executed[:, 1], "k-", lw=1.8, label="executed", zorder=6)
        ax.set_aspect("equal")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def emit_plot(series, kind: str, path, **kwargs) -> str:
    """Dispatch to a figure builder by kind: line | histogram | trajectory-overlay."""
    if kind == "line":
        return line_plot(series, path, **kwargs)
    if kind == "histogram":
        return histogram_plot(series, path, **kwargs)
    if kind == "trajectory-overlay":
        if not isinstance(series, dict):
            raise ValueError("trajectory-overlay expects a dict of scene elements")
        return trajectory_overlay(path, **series, **kwargs)
    raise ValueError(f"unknown plot kind '{kind}'")
