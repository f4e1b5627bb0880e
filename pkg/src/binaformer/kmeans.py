"""Lloyd's algorithm with k-means++ seeding, used for acoustic unit discovery."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class KMeansModel:
    """Fitted clustering: ``centroids`` is (k, dim); assignment is nearest
    centroid under squared Euclidean distance, ties broken by lowest index."""

    k: int
    centroids: np.ndarray
    objective_history: list[float] = field(default_factory=list)

    def assign(self, points: np.ndarray) -> np.ndarray:
        return kmeans_assign(self, points)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff ** 2).sum(axis=2)


def kmeans_assign(model: KMeansModel, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    # argmin returns the first minimum, which is the tie-break we promise
    return _sq_distances(points, model.centroids).argmin(axis=1)


def _plusplus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[i] = points[rng.integers(n)]
            continue
        probs = closest / total
        centroids[i] = points[rng.choice(n, p=probs)]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(points: np.ndarray, k: int, max_iter: int = 50,
               seed: int = 0) -> KMeansModel:
    """Fit k centroids with Lloyd iterations until assignments stop changing.

    The summed squared distance is recorded per iteration and is
    non-increasing. An emptied cluster is re-seeded to the point farthest
    from its current centroid.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ConfigError(f"kmeans needs (n, dim) points, got shape {points.shape}")
    n = points.shape[0]
    if n < k:
        raise ConfigError(f"kmeans needs at least k={k} points, got {n}")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_seed(points, k, rng)
    history: list[float] = []
    labels = None
    for _ in range(max_iter):
        dists = _sq_distances(points, centroids)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if members.shape[0] == 0:
                farthest = ((points - centroids[c]) ** 2).sum(axis=1).argmax()
                centroids[c] = points[farthest]
            else:
                centroids[c] = members.mean(axis=0)
    return KMeansModel(k=k, centroids=centroids, objective_history=history)
