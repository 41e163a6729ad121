"""End-to-end counting (detect, embed, cluster, filter) and MAE/NMAE evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cluster as cl
from .detect import BLOB, DEFAULT_PATCH, ORACLE, Detection, box_iou, detect_blobs, detect_oracle, extract_all, greedy_match
from .embed import EmbeddingNet, forward
from .imageio import read_image
from .shapegen import DatasetManifest, ImageRecord, max_workers

logger = logging.getLogger(__name__)

SEEDED = "seeded"
UNSUPERVISED = "unsupervised"

# Reference values from the original evaluation (external datasets, full
# detection backbone). Context only; nothing here is expected to reproduce them.
REFERENCE_CELLS = {"mae": 12.0, "nmae": 0.07}
REFERENCE_REPTILE = {"mae": 8.66, "nmae": 0.086}


@dataclass
class PipelineConfig:
    detector: str = ORACLE
    mode: str = SEEDED
    patch: int = DEFAULT_PATCH
    threshold_quantile: float = 0.99
    min_area_px: int = 30
    min_count: int = 2
    preference: Optional[float] = None  # unsupervised; None -> median similarity
    search_steps: int = cl.SEARCH_STEPS
    damping: float = 0.5
    max_iter: int = 200
    convergence_iter: int = 15
    seed_min_iou: float = 0.3
    match_min_iou: float = 0.5
    nmae_mode: str = "sum"

    def __post_init__(self):
        if self.detector not in (ORACLE, BLOB):
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.mode not in (SEEDED, UNSUPERVISED):
            raise ValueError(f"unknown cluster mode {self.mode!r}")
        if self.nmae_mode not in ("sum", "mean_relative"):
            raise ValueError(f"unknown nmae_mode {self.nmae_mode!r}")

    @property
    def ap(self) -> cl.APConfig:
        return cl.APConfig(self.damping, self.max_iter, self.convergence_iter)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ClusterCount:
    exemplar: int
    members: list[int]

    @property
    def count(self) -> int:
        return len(self.members)


@dataclass
class CountReport:
    image_id: str
    mode: str
    preference: Optional[float]
    detections: list[Detection] = field(default_factory=list)
    clusters: list[ClusterCount] = field(default_factory=list)
    result: Optional[cl.ClusterResult] = None
    seeds: list[int] = field(default_factory=list)
    note: str = ""

    @property
    def total(self) -> int:
        return sum(c.count for c in self.clusters)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "mode": self.mode,
            "preference": self.preference,
            "total": self.total,
            "clusters": [{"exemplar": c.exemplar, "members": c.members, "count": c.count} for c in self.clusters],
            "detections": [d.to_dict(self.image_id) for d in self.detections],
            "seeds": self.seeds,
            "note": self.note,
        }


def bind_seeds(dets: Sequence[Detection], seed_boxes, min_iou: float = 0.3) -> list[int]:
    """Map each seed box to the detection with the highest IoU (lowest index on ties)."""
    out = []
    for box in seed_boxes:
        ious = [box_iou(d.bbox, box) for d in dets]
        if not ious or max(ious) < min_iou:
            raise ValueError(f"seed {list(box)} matches no detection with IoU >= {min_iou}")
        j = int(np.argmax(ious))
        if j in out:
            raise ValueError(f"seeds {list(box)} and another seed bind to the same detection")
        out.append(j)
    return out


def detect(raster, record: Optional[ImageRecord], config: PipelineConfig) -> list[Detection]:
    if config.detector == ORACLE:
        if record is None:
            raise ValueError("oracle detector needs the annotated record")
        return detect_oracle(record)
    return detect_blobs(raster, config.threshold_quantile, config.min_area_px)


def describe(raster, dets: Sequence[Detection], net: EmbeddingNet, patch: int = DEFAULT_PATCH) -> np.ndarray:
    X = extract_all(raster, list(dets), patch)
    if len(X) == 0:
        return np.zeros((0, net.W2.shape[0]))
    return forward(net, X)


def count_clusters(image_id: str, dets: list[Detection], descriptors: np.ndarray, config: PipelineConfig,
                   seeds: Sequence[int] = (), fallback: bool = False) -> CountReport:
    """Cluster descriptors and keep the counted clusters.

    In seeded mode an unseparable seed set raises ``SeedsNotSeparable`` unless
    ``fallback`` is set, in which case the last grid result is used.
    """
    if len(dets) == 0:
        return CountReport(image_id, config.mode, None, [], [], None, list(seeds))
    note = ""
    if config.mode == SEEDED:
        if not seeds:
            raise ValueError("seeded mode needs at least one seed")
        try:
            pref, result = cl.preference_search(descriptors, seeds, config.ap, config.search_steps)
        except cl.SeedsNotSeparable as exc:
            if not fallback or exc.last is None:
                raise
            result, pref, note = exc.last, exc.last.preference, "seeds not separable; last grid result used"
        kept = cl.filter_clusters(result, cl.Seeded(tuple(seeds)))
    else:
        pref = config.preference if config.preference is not None else cl.median_similarity(descriptors)
        result = cl.cluster_descriptors(descriptors, pref, config.ap)
        kept = cl.filter_clusters(result, cl.Unsupervised(config.min_count))
    groups = result.clusters()
    clusters = [ClusterCount(k, groups[k]) for k in kept]
    return CountReport(image_id, config.mode, float(pref), list(dets), clusters, result, list(seeds), note)


def run_pipeline(raster, net: EmbeddingNet, config: PipelineConfig, record: Optional[ImageRecord] = None,
                 seed_boxes=None, image_id: Optional[str] = None, fallback: bool = False) -> CountReport:
    """detect -> features -> descriptors -> clustering -> filtering -> counts."""
    if image_id is None:
        image_id = record.id if record is not None else "image"
    dets = detect(raster, record, config)
    if not dets:
        return CountReport(image_id, config.mode, None)
    seeds: list[int] = []
    if config.mode == SEEDED:
        if not seed_boxes:
            raise ValueError("seeded mode needs seed boxes")
        seeds = bind_seeds(dets, seed_boxes, config.seed_min_iou)
    Y = describe(raster, dets, net, config.patch)
    return count_clusters(image_id, dets, Y, config, seeds, fallback)


# --------------------------------------------------------------------------
# metrics


def mae(preds, gts) -> float:
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("no evaluation units")
    return float(np.abs(p - g).mean())


def nmae(preds, gts, mode: str = "sum") -> float:
    """Absolute error normalized by ground truth.

    ``sum``: sum |pred - gt| / sum gt. ``mean_relative``: mean of |pred - gt| / gt.
    """
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("no evaluation units")
    if mode == "sum":
        if g.sum() <= 0:
            raise ValueError("ground truth counts are all zero")
        return float(np.abs(p - g).sum() / g.sum())
    if mode == "mean_relative":
        if np.any(g <= 0):
            raise ValueError("mean_relative NMAE needs positive ground truth counts")
        return float((np.abs(p - g) / g).mean())
    raise ValueError(f"unknown nmae mode {mode!r}")


def match_clusters_to_gt(report: CountReport, record: ImageRecord, targets: Optional[Sequence[int]] = None,
                         min_iou: float = 0.5) -> list[tuple[int, int, int]]:
    """Per targeted type index: (type_index, predicted count, ground-truth count).

    Each kept cluster takes the type of the majority of its IoU-matched
    members (lowest type index on ties) and contributes its full size to that
    type. Clusters with no matched member are not credited to any type.
    """
    if targets is None:
        targets = range(len(record.types_present))
    targets = sorted(set(int(t) for t in targets))
    gt_types = [record.type_index(inst.type) for inst in record.instances]
    match = greedy_match([d.bbox for d in report.detections], [inst.bbox for inst in record.instances], min_iou)
    pred = {t: 0 for t in targets}
    for c in report.clusters:
        votes: dict[int, int] = {}
        for m in c.members:
            if m in match:
                t = gt_types[match[m]]
                votes[t] = votes.get(t, 0) + 1
        if not votes:
            continue
        best = max(votes.values())
        t = min(k for k, v in votes.items() if v == best)
        if t in pred:
            pred[t] += c.count
    gt = {t: gt_types.count(t) for t in targets}
    return [(t, pred[t], gt[t]) for t in targets]


@dataclass
class MetricSummary:
    mae: float
    nmae: float
    rows: list[tuple[str, int, int, int, int]]  # image_id, type_id, pred, gt, abs_err
    config_hash: str = ""
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_units(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "type_id", "pred", "gt", "abs_err"])
        w.writerows(self.rows)
        return buf.getvalue()

    def summary(self) -> dict:
        return {"mae": self.mae, "nmae": self.nmae, "n_units": self.n_units, "config_hash": self.config_hash}


def seed_boxes_for(record: ImageRecord) -> list[tuple[int, int, int, int]]:
    """One seed per type present: its first annotated instance."""
    out = []
    for t in record.types_present:
        inst = next(i for i in record.instances if i.type == t)
        out.append(inst.bbox)
    return out


def evaluate_image(raster, record: ImageRecord, net: EmbeddingNet, config: PipelineConfig):
    """Per-type rows for one image; pipeline failures give zero predictions and an error message."""
    targets = list(range(len(record.types_present)))
    seeds = seed_boxes_for(record) if config.mode == SEEDED else None
    try:
        report = run_pipeline(raster, net, config, record, seeds, fallback=True)
        units = match_clusters_to_gt(report, record, targets, config.match_min_iou)
        err = report.note or None
    except (ValueError, cl.SeedsNotSeparable) as exc:
        gt_types = [record.type_index(i.type) for i in record.instances]
        units = [(t, 0, gt_types.count(t)) for t in targets]
        err = str(exc)
    rows = [(record.id, t, p, g, abs(p - g)) for t, p, g in units]
    return rows, err


def _eval_job(args):
    path, record, net, config = args
    try:
        raster = read_image(path)
    except OSError as exc:
        gt_types = [record.type_index(i.type) for i in record.instances]
        rows = [(record.id, t, 0, gt_types.count(t), gt_types.count(t)) for t in range(len(record.types_present))]
        return rows, f"cannot read {path}: {exc}"
    return evaluate_image(raster, record, net, config)


def eval_dataset(manifest: DatasetManifest, dataset_dir, net: EmbeddingNet, config: PipelineConfig,
                 split: str = "test", limit: Optional[int] = None) -> MetricSummary:
    idx = manifest.split_indices(split)
    if limit is not None:
        idx = idx[:limit]
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    jobs = [(Path(dataset_dir) / manifest.files[i], manifest.records[i], net, config) for i in idx]
    workers = max_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_job, jobs, chunksize=4))
    else:
        results = [_eval_job(j) for j in jobs]
    rows, errors = [], []
    for (path, record, _, _), (r, err) in zip(jobs, results):
        rows.extend(r)
        if err:
            errors.append((record.id, err))
            logger.warning("%s: %s", record.id, err)
    preds = [r[2] for r in rows]
    gts = [r[3] for r in rows]
    return MetricSummary(mae(preds, gts), nmae(preds, gts, config.nmae_mode), rows, config.hash(), errors)
