"""Overlays and report figures.

Overlays are drawn with numpy so their bytes depend only on the inputs;
figures go through matplotlib's Agg backend.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# 12 high-contrast colors, cycled by cluster index
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (0, 0, 128), (170, 110, 40), (255, 255, 255),
)
DISCARDED = (128, 128, 128)

_SAVE_KW = dict(dpi=100, metadata={"Software": None})


def palette_color(i: int) -> tuple[int, int, int]:
    return PALETTE[i % len(PALETTE)]


def draw_box(img: np.ndarray, bbox, color, width: int = 2) -> None:
    H, W = img.shape[:2]
    x0, y0, x1, y1 = bbox
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, W), min(y1, H)
    if x1 <= x0 or y1 <= y0:
        return
    w = max(1, min(width, (x1 - x0 + 1) // 2, (y1 - y0 + 1) // 2))
    img[y0:y0 + w, x0:x1] = color
    img[y1 - w:y1, x0:x1] = color
    img[y0:y1, x0:x0 + w] = color
    img[y0:y1, x1 - w:x1] = color


def cluster_overlay(raster: np.ndarray, boxes, groups, discarded=()) -> np.ndarray:
    """Copy of ``raster`` with the boxes of group i outlined in palette color i
    and the boxes listed in ``discarded`` outlined in gray."""
    out = np.array(raster, dtype=np.uint8, copy=True)
    for j in discarded:
        draw_box(out, boxes[j], DISCARDED, 1)
    for gi, members in enumerate(groups):
        for j in members:
            draw_box(out, boxes[j], palette_color(gi), 2)
    return out


def report_overlay(raster: np.ndarray, report) -> np.ndarray:
    boxes = [d.bbox for d in report.detections]
    groups = [c.members for c in report.clusters]
    kept = {j for g in groups for j in g}
    return cluster_overlay(raster, boxes, groups, [j for j in range(len(boxes)) if j not in kept])


def result_overlay(raster: np.ndarray, detections, result) -> np.ndarray:
    """Every cluster of a clustering result, colored by cluster index."""
    boxes = [d.bbox for d in detections]
    return cluster_overlay(raster, boxes, list(result.clusters().values()))


def plot_loss_curve(curve, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch triplet loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_eval(rows, path, title: str = "") -> None:
    """Predicted vs ground-truth counts and the absolute-error histogram."""
    pred = np.array([r[2] for r in rows], dtype=float)
    gt = np.array([r[3] for r in rows], dtype=float)
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 4))
    hi = max(pred.max(initial=1), gt.max(initial=1)) + 1
    a.plot([0, hi], [0, hi], color="0.6", lw=1)
    a.scatter(gt, pred, s=12, alpha=0.6)
    a.set_xlabel("ground-truth count")
    a.set_ylabel("predicted count")
    err = np.abs(pred - gt)
    b.hist(err, bins=np.arange(0, err.max(initial=0) + 2) - 0.5)
    b.set_xlabel("absolute error")
    b.set_ylabel("units")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_sweep(preferences, results, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(list(preferences), [r.n_clusters for r in results], where="mid")
    ax.set_xlabel("preference")
    ax.set_ylabel("clusters")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
