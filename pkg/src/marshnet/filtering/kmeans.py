"""Lloyd's k-means with k-means++ seeding and best-of-restarts selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import rng as rng_mod


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(points, centroids)
    labels = d.argmin(axis=1)  # first minimum: ties go to the lower index
    return labels, d[np.arange(len(points)), labels]


def _plus_plus(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[gen.integers(n)]]
    for _ in range(1, k):
        d = _sq_dists(points, np.array(centers)).min(axis=1)
        total = d.sum()
        idx = gen.integers(n) if total <= 0 else gen.choice(n, p=d / total)
        centers.append(points[idx])
    return np.array(centers, dtype=np.float64)


def lloyd(points: np.ndarray, init: np.ndarray, max_iters: int = 100) -> KMeansResult:
    centroids = init.copy()
    k = len(centroids)
    labels, d = _assign(points, centroids)
    history = [float(d.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its centroid.
                far = int(d.argmax())
                centroids[c] = points[far]
                d[far] = 0.0
        new_labels, d = _assign(points, centroids)
        history.append(float(d.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(centroids, labels, float(d.sum()), it, history)


def hartigan(points: np.ndarray, result: KMeansResult, max_passes: int = 50) -> KMeansResult:
    """Single-point transfers that strictly lower inertia, then re-run Lloyd.

    Partitions stable under these moves are also Lloyd fixed points, and
    escape many of Lloyd's poorer local minima.
    """
    labels = result.labels.copy()
    k = len(result.centroids)
    history = list(result.history)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    for _ in range(max_passes):
        moved = False
        for i in range(len(points)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            cents = sums / np.maximum(counts, 1.0)[:, None]
            d = ((points[i] - cents) ** 2).sum(axis=1)
            loss_out = counts[a] / (counts[a] - 1) * d[a]
            gain_in = counts / (counts + 1) * d
            gain_in[a] = np.inf
            b = int(gain_in.argmin())
            if gain_in[b] < loss_out - 1e-12:
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= points[i]
                sums[b] += points[i]
                moved = True
        if not moved:
            break
    cents = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    refined = lloyd(points, cents)
    refined.history = history + refined.history
    return refined


def kmeans(points: np.ndarray, k: int = 2, seed: int = 0, max_iters: int = 100, restarts: int = 10,
           refine: bool = True) -> KMeansResult:
    """Best-inertia result over ``restarts`` k-means++ initialisations."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n = len(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    gen = rng_mod.stream(seed, "kmeans")
    best: KMeansResult | None = None
    for _ in range(max(restarts, 1)):
        res = lloyd(points, _plus_plus(points, k, gen), max_iters)
        if refine and k > 1:
            res = hartigan(points, res)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = np.asarray(points, dtype=np.float64) - centroids[labels]
    return float((diff ** 2).sum())
