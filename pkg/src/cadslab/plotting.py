"""Scatter and line figures written as standalone, reproducible SVG files."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no date stamp, so the same data gives the same bytes
_RC = {"svg.hashsalt": "cadslab", "svg.fonttype": "path", "font.size": 8, "axes.titlesize": 9}
_METADATA = {"Date": None, "Creator": "cadslab"}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_METADATA)
    plt.close(fig)


def scatter_panels(
    path,
    panels: Sequence[tuple],
    extent: float,
    title: Optional[str] = None,
    num_classes: Optional[int] = None,
) -> None:
    """One scatter panel per ``(name, points, labels)`` entry, sharing a fixed square range."""
    if not panels:
        raise ValueError("no panels requested")
    if num_classes is None:
        num_classes = int(max(np.max(lab) for _, _, lab in panels)) + 1
    cmap = plt.get_cmap("tab20", max(num_classes, 1))
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4), squeeze=False)
        for ax, (name, pts, lab) in zip(axes[0], panels):
            pts = np.asarray(pts)
            ax.scatter(pts[:, 0], pts[:, 1], c=np.asarray(lab) % cmap.N, cmap=cmap, vmin=0, vmax=cmap.N - 1, s=2, linewidths=0)
            ax.set_xlim(-extent, extent)
            ax.set_ylim(-extent, extent)
            ax.set_aspect("equal")
            ax.set_title(name)
            ax.set_xlabel("x0")
        axes[0][0].set_ylabel("x1")
        handles = [
            plt.Line2D([], [], ls="", marker="o", ms=3, color=cmap(k % cmap.N), label=str(k))
            for k in range(num_classes)
        ]
        fig.legend(handles=handles, title="label", loc="outside right center", ncols=max(1, num_classes // 13 + 1),
                   fontsize=5, title_fontsize=6, frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)


def ablation_figure(path, param: str, values: Sequence, rows: Sequence[dict], metrics=("recall", "fd2d")) -> None:
    """Metric-vs-parameter lines for a one-dimensional ablation sweep."""
    if not rows:
        raise ValueError("no ablation rows")
    labels = [str(v) for v in values]
    x = np.arange(len(labels))
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 2.8), squeeze=False)
        for ax, m in zip(axes[0], metrics):
            ys = [np.nan if r.get(m) is None else r[m] for r in rows]
            ax.plot(x, ys, marker="o", color="k", lw=1)
            ax.set_xticks(x)
            ax.set_xticklabels(labels)
            ax.set_xlabel(param)
            ax.set_ylabel(m)
        fig.tight_layout()
        _save(fig, path)


def per_condition_figure(path, per_condition: dict) -> None:
    """Bar chart of per-label Vendi."""
    labs = sorted(per_condition)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 2.6))
        ax.bar(np.arange(len(labs)), [per_condition[k]["vendi"] for k in labs], color="0.4")
        ax.set_xticks(np.arange(len(labs)))
        ax.set_xticklabels([str(k) for k in labs], fontsize=6)
        ax.set_xlabel("label")
        ax.set_ylabel("Vendi")
        fig.tight_layout()
        _save(fig, path)
