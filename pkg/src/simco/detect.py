"""Detection boxes and fixed-size region features.

Two detectors stand in for a learned region proposer: the ground-truth oracle
(isolates embedding and clustering quality) and a color-distance blob
detector (exercises the whole pipeline on raw pixels).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

from .shapegen import LINE_ASPECT, SCALE_MAX, SCALE_MIN, ImageRecord

ORACLE = "oracle"
BLOB = "blob"
DEFAULT_PATCH = 16

# log box-area fraction range mapped onto [0, 1]; spans a thin bar at the
# smallest scale up to a 45-degree square at the largest
_LOG_AREA_LO = math.log(SCALE_MIN ** 2 / LINE_ASPECT)
_LOG_AREA_HI = math.log(2 * SCALE_MAX ** 2)


@dataclass(frozen=True)
class Detection:
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1; x1/y1 exclusive
    score: float = 1.0
    source: str = ORACLE

    def __post_init__(self):
        x0, y0, x1, y1 = (int(v) for v in self.bbox)
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box {self.bbox}")
        if x0 < 0 or y0 < 0:
            raise ValueError(f"box {self.bbox} has negative coordinates")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.source not in (ORACLE, BLOB):
            raise ValueError(f"unknown detection source {self.source!r}")

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)

    def to_dict(self, image_id=None) -> dict:
        return {"image_id": image_id, "bbox": list(self.bbox), "score": self.score, "source": self.source}


def detections_to_jsonl(items: Iterable[tuple[str, Detection]]) -> str:
    return "".join(json.dumps(d.to_dict(image_id)) + "\n" for image_id, d in items)


def detections_from_jsonl(text: str) -> list[tuple[str, Detection]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append((d["image_id"], Detection(tuple(d["bbox"]), float(d["score"]), d["source"])))
    return out


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def greedy_match(pred_boxes, gt_boxes, min_iou: float = 0.5) -> dict[int, int]:
    """Greedy highest-IoU matching, each box used at most once.

    Returns {pred index: gt index}. Ties go to the lowest (pred, gt) pair.
    """
    pairs = []
    for i, p in enumerate(pred_boxes):
        for j, g in enumerate(gt_boxes):
            v = box_iou(p, g)
            if v >= min_iou:
                pairs.append((-v, i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), {}
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out[i] = j
    return out


def detect_oracle(record: ImageRecord) -> list[Detection]:
    return [Detection(inst.bbox, 1.0, ORACLE) for inst in record.instances]


def detect_blobs(raster: np.ndarray, threshold_quantile: float = 0.99, min_area_px: int = 30,
                 threshold_scale: float = 1.5) -> list[Detection]:
    """Connected components of pixels far (in RGB) from the median background color.

    The threshold is ``threshold_scale`` times the ``threshold_quantile``
    quantile of distances over pixels judged background by a coarse first
    pass (distance within four median distances). Touching shapes merge into
    one detection.
    """
    img = raster.astype(np.float64)
    bg = np.median(img.reshape(-1, 3), axis=0)
    dist = np.sqrt(((img - bg) ** 2).sum(axis=2))
    coarse = max(4.0 * float(np.median(dist)), 8.0)
    bg_dist = dist[dist <= coarse]
    q = float(np.quantile(bg_dist, threshold_quantile)) if bg_dist.size else 0.0
    threshold = threshold_scale * max(q, 1.0)
    mask = dist > threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(mask, labels, idx)
    means = ndimage.mean(dist, labels, idx)
    slices = ndimage.find_objects(labels)
    max_dist = 255.0 * math.sqrt(3.0)
    out = []
    for k, sl in enumerate(slices):
        if sl is None or areas[k] < min_area_px:
            continue
        ys, xs = sl
        score = float(min(max(means[k] / max_dist, 0.0), 1.0))
        out.append(Detection((xs.start, ys.start, xs.stop, ys.stop), score, BLOB))
    return out


def resize_bilinear(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling; identity when sizes match."""
    h, w = patch.shape[:2]
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2])
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    p = patch.astype(np.float64)
    if p.ndim == 2:
        p = p[:, :, None]
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out if patch.ndim == 3 else out[:, :, 0]


def scale_feature(bbox, width: int, height: int) -> float:
    x0, y0, x1, y1 = bbox
    frac = (x1 - x0) * (y1 - y0) / float(width * height)
    v = (math.log(frac) - _LOG_AREA_LO) / (_LOG_AREA_HI - _LOG_AREA_LO)
    return min(max(v, 0.0), 1.0)


def feature_dim(patch: int = DEFAULT_PATCH) -> int:
    return patch * patch * 3 + 1


def extract_features(raster: np.ndarray, det: Detection, patch: int = DEFAULT_PATCH) -> np.ndarray:
    """Flattened P x P x 3 crop in [0, 1] followed by the normalized log box scale."""
    H, W = raster.shape[:2]
    x0, y0, x1, y1 = det.bbox
    if x1 > W or y1 > H:
        raise ValueError(f"box {det.bbox} outside {W}x{H} raster")
    crop = raster[y0:y1, x0:x1]
    resized = resize_bilinear(crop, patch, patch) / 255.0
    return np.concatenate([resized.ravel(), [scale_feature(det.bbox, W, H)]])


def extract_all(raster: np.ndarray, dets: list[Detection], patch: int = DEFAULT_PATCH) -> np.ndarray:
    if not dets:
        return np.zeros((0, feature_dim(patch)))
    return np.stack([extract_features(raster, d, patch) for d in dets])
