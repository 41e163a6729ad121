"""Affinity propagation over descriptors, preference sweeps, the seed-driven
preference search, and outlier filtering."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

SEARCH_STEPS = 64
# damping levels tried, in order, when a run oscillates without converging
ESCALATION = (0.7, 0.9)
TIE_BIAS = 1e-9


@dataclass(frozen=True)
class APConfig:
    damping: float = 0.5
    max_iter: int = 200
    convergence_iter: int = 15

    def __post_init__(self):
        if not 0.5 <= self.damping < 1.0:
            raise ValueError(f"damping {self.damping} outside [0.5, 1)")
        if self.max_iter < 1 or self.convergence_iter < 1:
            raise ValueError("max_iter and convergence_iter must be positive")


@dataclass
class ClusterResult:
    exemplars: list[int]
    assignment: list[int]
    converged: bool
    iterations: int
    preference: float = 0.0

    def clusters(self) -> dict[int, list[int]]:
        """Exemplar -> member indices, exemplars in increasing order."""
        out: dict[int, list[int]] = {k: [] for k in self.exemplars}
        for i, k in enumerate(self.assignment):
            out[k].append(i)
        return out

    @property
    def n_clusters(self) -> int:
        return len(self.exemplars)

    def partition(self) -> frozenset:
        return frozenset(frozenset(m) for m in self.clusters().values())

    def to_dict(self) -> dict:
        return {"preference": self.preference, "converged": self.converged, "iterations": self.iterations,
                "exemplars": list(self.exemplars), "assignment": list(self.assignment)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterResult":
        return cls(list(d["exemplars"]), list(d["assignment"]), bool(d["converged"]), int(d["iterations"]),
                   float(d["preference"]))


class SeedsNotSeparable(RuntimeError):
    """No preference on the search grid puts every seed in its own cluster."""

    def __init__(self, message: str, last: Optional[ClusterResult] = None):
        super().__init__(message)
        self.last = last


def squared_distances(descriptors) -> np.ndarray:
    Y = np.asarray(descriptors, dtype=np.float64)
    diff = Y[:, None, :] - Y[None, :, :]
    return (diff * diff).sum(axis=2)


def build_similarity(descriptors, preference: float) -> np.ndarray:
    """Negative squared Euclidean distances with ``preference`` on the diagonal."""
    S = -squared_distances(descriptors)
    np.fill_diagonal(S, preference)
    return S


def offdiag(S: np.ndarray) -> np.ndarray:
    n = S.shape[0]
    return S[~np.eye(n, dtype=bool)]


def median_similarity(descriptors) -> float:
    D = squared_distances(descriptors)
    if D.shape[0] < 2:
        return 0.0
    return float(np.median(-offdiag(D)))


def assign_to_exemplars(S: np.ndarray, exemplars: Sequence[int]) -> list[int]:
    """Each point goes to the exemplar with the highest similarity (lowest
    index on ties); exemplars map to themselves."""
    ex = np.asarray(sorted(exemplars), dtype=int)
    choice = ex[np.argmax(S[:, ex], axis=1)]
    choice[ex] = ex
    return [int(c) for c in choice]


def affinity_propagation(S: np.ndarray, config: APConfig = APConfig()) -> ClusterResult:
    """Frey-Dueck message passing on a dense similarity matrix.

    Exemplars are the points with positive r(k,k) + a(k,k). When none
    qualifies, the best single exemplar (highest total similarity of the
    other points to it) is used so the result still partitions the data.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if S.shape != (n, n) or n == 0:
        raise ValueError(f"similarity matrix must be square and non-empty, got {S.shape}")
    pref = float(S[0, 0])
    if n == 1:
        return ClusterResult([0], [0], True, 0, pref)

    lam = config.damping
    S_in = S
    scale = max(1.0, float(np.max(np.abs(S[np.isfinite(S)])))) if np.isfinite(S).any() else 1.0
    S = S + TIE_BIAS * scale * ((n - np.arange(n)) / n)[None, :]
    R = np.zeros_like(S)
    A = np.zeros_like(S)
    rows = np.arange(n)
    last: Optional[np.ndarray] = None
    stable = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        # responsibilities
        AS = A + S
        first = np.argmax(AS, axis=1)
        best = AS[rows, first]
        AS[rows, first] = -np.inf
        second = np.max(AS, axis=1)
        Rnew = S - best[:, None]
        Rnew[rows, first] = S[rows, first] - second
        R = lam * R + (1 - lam) * Rnew

        # availabilities
        Rp = np.maximum(R, 0.0)
        Rp[rows, rows] = R[rows, rows]
        col = Rp.sum(axis=0)
        Anew = col[None, :] - Rp
        diag = Anew[rows, rows].copy()
        Anew = np.minimum(Anew, 0.0)
        Anew[rows, rows] = diag
        A = lam * A + (1 - lam) * Anew

        E = np.diag(R) + np.diag(A)
        current = E > 0
        if last is not None and np.array_equal(current, last):
            stable += 1
        else:
            stable = 0
        last = current
        if stable >= config.convergence_iter - 1 and it >= config.convergence_iter and current.any():
            converged = True
            break

    E = np.diag(R) + np.diag(A)
    S = S_in
    exemplars = [int(k) for k in np.flatnonzero(E > 0)]
    if not exemplars:
        off = S.copy()
        np.fill_diagonal(off, 0.0)
        exemplars = [int(np.argmax(off.sum(axis=0)))]
    return ClusterResult(exemplars, assign_to_exemplars(S, exemplars), converged, it, pref)


def affinity_propagation_damped(S: np.ndarray, config: APConfig = APConfig()) -> ClusterResult:
    """Run affinity propagation, retrying with heavier damping while it fails to converge.

    Returns the first converged run, or the last attempt if none converges.
    """
    result = affinity_propagation(S, config)
    for lam in ESCALATION:
        if result.converged or lam <= config.damping:
            continue
        result = affinity_propagation(S, APConfig(lam, config.max_iter, config.convergence_iter))
    return result


def collapse_duplicates(descriptors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct descriptor rows in order of first occurrence.

    Returns (first index of each distinct row, multiplicity, inverse map from
    every point to its distinct row).
    """
    Y = np.asarray(descriptors, dtype=np.float64)
    _, first, inverse, counts = np.unique(Y, axis=0, return_index=True, return_inverse=True, return_counts=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return first[order], counts[order], rank[np.ravel(inverse)]


def cluster_descriptors(descriptors, preference: float, config: APConfig = APConfig()) -> ClusterResult:
    """Affinity propagation over descriptors, exact duplicates counted once.

    Identical descriptors (common for shapes that fill their box) stall the
    message passing: each copy is an equally good exemplar for the others, so
    none is ever nominated. They are merged into one weighted point whose
    off-diagonal similarities are scaled by its multiplicity, which leaves the
    exemplar objective unchanged, and the lowest index of each group stands in
    for it.
    """
    Y = np.asarray(descriptors, dtype=np.float64)
    S = build_similarity(Y, preference)
    first, counts, _ = collapse_duplicates(Y)
    if len(first) == len(Y):
        return affinity_propagation_damped(S, config)
    Su = S[np.ix_(first, first)] * counts[:, None]
    np.fill_diagonal(Su, preference)
    sub = affinity_propagation_damped(Su, config)
    exemplars = sorted(int(first[k]) for k in sub.exemplars)
    return ClusterResult(exemplars, assign_to_exemplars(S, exemplars), sub.converged, sub.iterations,
                         float(preference))


def exemplar_objective(S: np.ndarray, exemplars: Sequence[int], preference: Optional[float] = None) -> float:
    """Net similarity of an exemplar set: sum of s(i, exemplar(i)) over
    non-exemplars plus the preference once per exemplar."""
    S = np.asarray(S, dtype=np.float64)
    if preference is None:
        preference = float(S[0, 0])
    ex = sorted(exemplars)
    assign = assign_to_exemplars(S, ex)
    exs = set(ex)
    total = preference * len(ex)
    for i, k in enumerate(assign):
        if i not in exs:
            total += S[i, k]
    return float(total)


def brute_force_exemplars(S: np.ndarray) -> tuple[float, list[int]]:
    """Exhaustive maximization of the exemplar objective over all non-empty
    exemplar subsets; feasible for n <= ~12."""
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    pref = float(S[0, 0])
    off = S.copy()
    np.fill_diagonal(off, -np.inf)
    best_val, best_set = -np.inf, []
    for size in range(1, n + 1):
        for ex in itertools.combinations(range(n), size):
            ex = list(ex)
            mask = np.ones(n, dtype=bool)
            mask[ex] = False
            val = pref * size + float(off[mask][:, ex].max(axis=1).sum()) if mask.any() else pref * size
            if val > best_val:
                best_val, best_set = val, ex
    return best_val, best_set


def preference_sweep(descriptors, preferences, config: APConfig = APConfig()) -> list[ClusterResult]:
    prefs = list(preferences)
    if not prefs:
        raise ValueError("empty preference list")
    return [cluster_descriptors(descriptors, p, config) for p in prefs]


def preference_grid(descriptors, steps: int = SEARCH_STEPS) -> np.ndarray:
    """Linear grid from the smallest to the largest off-diagonal similarity."""
    D = squared_distances(descriptors)
    if D.shape[0] < 2:
        return np.array([0.0])
    vals = -offdiag(D)
    return np.linspace(float(vals.min()), float(vals.max()), steps)


def seeds_separated(result: ClusterResult, seeds: Sequence[int]) -> bool:
    owners = [result.assignment[s] for s in seeds]
    return len(set(owners)) == len(owners)


def preference_search(descriptors, seeds: Sequence[int], config: APConfig = APConfig(),
                      steps: int = SEARCH_STEPS) -> tuple[float, ClusterResult]:
    """Raise the preference along a fixed grid until every seed sits in its
    own cluster; returns the first such (preference, result)."""
    Y = np.asarray(descriptors, dtype=np.float64)
    n = len(Y)
    seeds = [int(s) for s in seeds]
    if not 1 <= len(seeds) <= n:
        raise ValueError(f"need between 1 and {n} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds) or min(seeds) < 0 or max(seeds) >= n:
        raise ValueError(f"seed indices must be distinct and in range: {seeds}")
    result = None
    for p in preference_grid(Y, steps):
        result = cluster_descriptors(Y, float(p), config)
        if seeds_separated(result, seeds):
            return float(p), result
    raise SeedsNotSeparable("seeds not separable", result)


@dataclass(frozen=True)
class Seeded:
    seeds: tuple[int, ...]


@dataclass(frozen=True)
class Unsupervised:
    min_count: int = 2


FilterMode = Union[Seeded, Unsupervised]


def filter_clusters(result: ClusterResult, mode: FilterMode) -> list[int]:
    """Exemplars of the clusters that are counted.

    Seeded keeps exactly the clusters holding a seed; Unsupervised drops
    clusters smaller than ``min_count`` as outliers.
    """
    clusters = result.clusters()
    if isinstance(mode, Seeded):
        owners = {result.assignment[s] for s in mode.seeds}
        return [k for k in clusters if k in owners]
    return [k for k, members in clusters.items() if len(members) >= mode.min_count]
