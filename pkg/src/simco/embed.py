"""Similarity head: region features -> 64-d unit-norm descriptors.

A one-hidden-layer rectifier network followed by L2 normalization, trained
with the Batch-All triplet loss. Gradients are derived by hand.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .detect import DEFAULT_PATCH, detect_oracle, extract_all, feature_dim
from .imageio import read_image
from .shapegen import DatasetManifest, ObjectType

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
DESCRIPTOR_DIM = 64
HIDDEN_DIM = 128
NORM_EPS = 1e-12


@dataclass
class EmbeddingNet:
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray
    W2: np.ndarray  # (64, hidden)
    b2: np.ndarray

    @classmethod
    def init(cls, input_dim: int = feature_dim(DEFAULT_PATCH), hidden: int = HIDDEN_DIM,
             out: int = DESCRIPTOR_DIM, seed: int = 0) -> "EmbeddingNet":
        rng = np.random.default_rng(seed)
        lim1 = math.sqrt(6.0 / (input_dim + hidden))
        lim2 = math.sqrt(6.0 / (hidden + out))
        return cls(rng.uniform(-lim1, lim1, size=(hidden, input_dim)), np.zeros(hidden),
                   rng.uniform(-lim2, lim2, size=(out, hidden)), np.zeros(out))

    @property
    def dims(self) -> list[int]:
        return [self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def _forward_cache(net: EmbeddingNet, X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.W1.shape[1]:
        raise ValueError(f"feature length {X.shape[-1]} does not match net input {net.W1.shape[1]}")
    h_pre = X @ net.W1.T + net.b1
    h = np.maximum(h_pre, 0.0)
    z = h @ net.W2.T + net.b2
    norms = np.linalg.norm(z, axis=1)
    small = norms < NORM_EPS
    if small.any():
        z = z.copy()
        # fixed direction so a (near) zero vector still normalizes
        z[small] += NORM_EPS / math.sqrt(z.shape[1])
        norms = np.linalg.norm(z, axis=1)
    y = z / norms[:, None]
    return y, (X, h_pre, h, norms)


def forward(net: EmbeddingNet, X: np.ndarray) -> np.ndarray:
    """Descriptors for one feature vector (1-d) or a batch (2-d)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return _forward_cache(net, X[None, :])[0][0]
    return _forward_cache(net, X)[0]


# --------------------------------------------------------------------------
# triplet loss


def mine_pairs(labels) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (n, n) masks of positive pairs (same label, a != p) and
    negative pairs (different label)."""
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    pos = same & ~np.eye(len(lab), dtype=bool)
    return pos, ~same


def pairwise_distances(Y: np.ndarray) -> np.ndarray:
    diff = Y[:, None, :] - Y[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


@dataclass
class TripletStats:
    loss: float
    n_valid: int
    n_active: int

    @property
    def degenerate(self) -> bool:
        return self.n_valid == 0


def _hinge_terms(Y: np.ndarray, labels, alpha: float):
    pos, neg = mine_pairs(labels)
    D = pairwise_distances(Y)
    valid = pos[:, :, None] & neg[:, None, :]
    hinge = D[:, :, None] - D[:, None, :] + alpha
    active = valid & (hinge > 0)
    return D, valid, hinge, active


def triplet_stats(descriptors, labels, alpha: float = 0.2) -> TripletStats:
    Y = np.asarray(descriptors, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("margin must be positive")
    _, valid, hinge, active = _hinge_terms(Y, labels, alpha)
    return TripletStats(float(hinge[active].sum()), int(valid.sum()), int(active.sum()))


def triplet_loss(descriptors, labels, alpha: float = 0.2) -> float:
    """Batch-All triplet loss: sum over every anchor, positive and negative of
    max(|a - p| - |a - n| + alpha, 0) with non-squared distances.

    A batch without any valid triplet yields 0; see ``triplet_stats`` for the
    degenerate flag.
    """
    return triplet_stats(descriptors, labels, alpha).loss


def descriptor_gradient(Y: np.ndarray, labels, alpha: float = 0.2):
    """Gradient of the triplet loss with respect to the descriptors.

    Returns (grad, stats). The hinge kink and zero distances take subgradient 0.
    """
    D, valid, hinge, active = _hinge_terms(Y, labels, alpha)
    stats = TripletStats(float(hinge[active].sum()), int(valid.sum()), int(active.sum()))
    act = active.astype(np.float64)
    # coefficient of D[a, b] in the loss
    M = act.sum(axis=2) - act.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where(D > NORM_EPS, M / D, 0.0)
    C = C + C.T
    grad = Y * C.sum(axis=1)[:, None] - C @ Y
    return grad, stats


def backward(net: EmbeddingNet, cache, Y: np.ndarray, gY: np.ndarray) -> dict[str, np.ndarray]:
    X, h_pre, h, norms = cache
    gz = (gY - Y * (Y * gY).sum(axis=1, keepdims=True)) / norms[:, None]
    gW2 = gz.T @ h
    gb2 = gz.sum(axis=0)
    gh = (gz @ net.W2) * (h_pre > 0)
    gW1 = gh.T @ X
    gb1 = gh.sum(axis=0)
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


@dataclass
class TripletBatch:
    features: np.ndarray
    labels: np.ndarray
    alpha: float = 0.2

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("margin must be positive")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")


def loss_and_gradient(net: EmbeddingNet, batch: TripletBatch):
    Y, cache = _forward_cache(net, batch.features)
    gY, stats = descriptor_gradient(Y, batch.labels, batch.alpha)
    return stats, backward(net, cache, Y, gY)


def loss_gradient(net: EmbeddingNet, batch: TripletBatch) -> dict[str, np.ndarray]:
    """Exact parameter gradients of the (raw sum) triplet loss."""
    return loss_and_gradient(net, batch)[1]


def batch_loss(net: EmbeddingNet, batch: TripletBatch) -> float:
    return triplet_loss(forward(net, batch.features), batch.labels, batch.alpha)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_images: int = 4
    alpha: float = 0.2
    seed: int = 0
    hidden: int = HIDDEN_DIM
    patch: int = DEFAULT_PATCH

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImageFeatures:
    image_id: str
    features: np.ndarray
    labels: np.ndarray  # global type ids
    types: list[ObjectType] = field(default_factory=list)  # per detection


def type_labels(records) -> dict[ObjectType, int]:
    ids: dict[ObjectType, int] = {}
    for rec in records:
        for t in rec.types_present:
            ids.setdefault(t, len(ids))
    return ids


def oracle_features(manifest: DatasetManifest, dataset_dir, split: str, patch: int = DEFAULT_PATCH,
                    type_ids: Optional[dict] = None) -> list[ImageFeatures]:
    """Features of every oracle detection for the images of one split."""
    idx = manifest.split_indices(split)
    records = [manifest.records[i] for i in idx]
    if type_ids is None:
        type_ids = type_labels(records)
    out = []
    for i, rec in zip(idx, records):
        raster = read_image(Path(dataset_dir) / manifest.files[i])
        dets = detect_oracle(rec)
        X = extract_all(raster, dets, patch)
        types = [inst.type for inst in rec.instances]
        out.append(ImageFeatures(rec.id, X, np.array([type_ids[t] for t in types], dtype=np.int64), types))
    return out


def train_on_features(net: EmbeddingNet, images: list[ImageFeatures], cfg: TrainConfig):
    """SGD with momentum over Batch-All triplet batches of ``cfg.batch_images`` images.

    The step is divided by the number of active triplets (1 if none); the
    reported loss stays the raw sum. Returns (net, per-epoch mean batch loss).
    """
    images = [im for im in images if len(im.labels)]
    if not images:
        raise ValueError("empty training split")
    if len(images) < cfg.batch_images:
        raise ValueError(f"training split has {len(images)} images, fewer than batch_images={cfg.batch_images}")
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in net.params().items()}
    curve = []
    n_batches = len(images) // cfg.batch_images
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        losses = []
        for b in range(n_batches):
            chosen = order[b * cfg.batch_images:(b + 1) * cfg.batch_images]
            X = np.concatenate([images[i].features for i in chosen])
            labels = np.concatenate([images[i].labels for i in chosen])
            stats, grads = loss_and_gradient(net, TripletBatch(X, labels, cfg.alpha))
            step = cfg.lr / max(stats.n_active, 1)
            for k, p in net.params().items():
                velocity[k] *= cfg.momentum
                velocity[k] -= step * grads[k]
                p += velocity[k]
            losses.append(stats.loss)
        curve.append(float(np.mean(losses)) if losses else 0.0)
        logger.info("epoch %d mean loss %.6f", epoch + 1, curve[-1])
    return net, curve


def train(net: EmbeddingNet, manifest: DatasetManifest, cfg: TrainConfig, dataset_dir):
    feats = oracle_features(manifest, dataset_dir, "train", cfg.patch)
    if not feats:
        raise ValueError("manifest has an empty train split")
    return train_on_features(net, feats, cfg)


# --------------------------------------------------------------------------
# evaluation helpers


def nn_recall_at_1(descriptors: np.ndarray, labels) -> float:
    """Fraction of points whose nearest other point shares their label."""
    Y = np.asarray(descriptors, dtype=np.float64)
    lab = np.asarray(labels)
    if len(lab) < 2:
        raise ValueError("need at least two descriptors")
    D = cdist(Y, Y)
    np.fill_diagonal(D, np.inf)
    nn = np.argmin(D, axis=1)
    return float(np.mean(lab[nn] == lab))


def intra_inter_means(descriptors: np.ndarray, labels) -> tuple[float, float]:
    """Mean intra-label and inter-label distances (nan when undefined)."""
    D = pairwise_distances(np.asarray(descriptors, dtype=np.float64))
    pos, neg = mine_pairs(labels)
    intra = float(D[pos].mean()) if pos.any() else float("nan")
    inter = float(D[neg].mean()) if neg.any() else float("nan")
    return intra, inter


# --------------------------------------------------------------------------
# persistence


def model_to_dict(net: EmbeddingNet, alpha: float, train_config: Optional[dict] = None) -> dict:
    return {
        "version": MODEL_VERSION,
        "dims": net.dims,
        "weights": [net.W1.tolist(), net.W2.tolist()],
        "biases": [net.b1.tolist(), net.b2.tolist()],
        "alpha": alpha,
        "train_config": train_config or {},
    }


def save_model(path, net: EmbeddingNet, alpha: float, train_config: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(net, alpha, train_config)) + "\n")


def load_model(path) -> tuple[EmbeddingNet, dict]:
    d = json.loads(Path(path).read_text())
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {d.get('version')}")
    W1, W2 = (np.array(w, dtype=np.float64) for w in d["weights"])
    b1, b2 = (np.array(b, dtype=np.float64) for b in d["biases"])
    net = EmbeddingNet(W1, b1, W2, b2)
    if net.dims != d["dims"]:
        raise ValueError(f"{path}: weights do not match declared dims {d['dims']}")
    return net, d


def loss_curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for i, v in enumerate(curve, start=1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()
