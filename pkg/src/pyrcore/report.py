"""Figure rendering for the report paths.

Every CLI command that emits delimited output can render a companion
figure next to it: the parameter-reproduction chart, the (L, B) frontier
scatter, training loss curves and detection overlays. All rendering is
headless (Agg) and deterministic.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def save_table1_figure(path, rows, tolerance_pct: float = 2.0) -> None:
    """Horizontal deviation bars against the published parameter totals."""
    labels = [r["label"] for r in rows]
    devs = [r["deviation_pct"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    colors = ["tab:green" if abs(d) <= tolerance_pct else "tab:red" for d in devs]
    ax.barh(np.arange(len(rows)), devs, color=colors)
    ax.axvline(-tolerance_pct, color="k", ls="--", lw=0.8)
    ax.axvline(tolerance_pct, color="k", ls="--", lw=0.8)
    ax.set_yticks(np.arange(len(rows)), labels)
    ax.invert_yaxis()
    ax.set_xlabel("deviation from published params [%]")
    ax.set_xlim(-max(2.5, max(abs(d) for d in devs) * 1.2),
                max(2.5, max(abs(d) for d in devs) * 1.2))
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_frontier_figure(path, rows, metric_label: str = "toy AP50") -> None:
    """Params-vs-metric scatter, one polyline per L."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_L: dict[int, list] = {}
    for r in rows:
        by_L.setdefault(r["L"], []).append(r)
    for L, group in sorted(by_L.items()):
        group = sorted(group, key=lambda r: r["params"])
        xs = [r["params"] / 1e6 for r in group]
        ys = [r["metric"] for r in group]
        ax.plot(xs, ys, "o-", label=f"L={L}")
        for r in group:
            ax.annotate(f"({r['L']},{r['B']})", (r["params"] / 1e6, r["metric"]),
                        textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xlabel("parameters [M]")
    ax.set_ylabel(metric_label)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_loss_figure(path, loss_history) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(loss_history, lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_scene_overlay(path, scenes, detections_by_image, max_images: int = 4,
                       score_thresh: float = 0.3) -> None:
    """Ground truth (green) and predictions (red) over the first scenes."""
    n = min(max_images, len(scenes))
    fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6))
    if n == 1:
        axes = [axes]
    for i in range(n):
        ax = axes[i]
        ax.imshow(scenes[i].image.transpose(1, 2, 0))
        ax.set_axis_off()
        for b in scenes[i].boxes:
            ax.add_patch(plt.Rectangle((b[0], b[1]), b[2] - b[0], b[3] - b[1],
                                       fill=False, edgecolor="lime", lw=1.0))
        det = detections_by_image.get(i)
        if det is not None:
            for b, s in zip(det.boxes, det.scores):
                if s < score_thresh:
                    continue
                ax.add_patch(plt.Rectangle((b[0], b[1]), b[2] - b[0], b[3] - b[1],
                                           fill=False, edgecolor="red", lw=0.8, ls="--"))
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
