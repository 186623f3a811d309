"""Lloyd's k-means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_trace: list[float]
    n_iter: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over distinct rows of ``X``."""
    centers = [X[int(rng.integers(len(X)))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(len(X), p=d2 / total)) if total > 0 else int(rng.integers(len(X)))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Cluster ``vectors`` into ``k`` groups.

    Stops when no assignment changes or after ``max_iters`` rounds. The trace
    holds the within-cluster sum of squares after every update step and never
    increases. An emptied cluster is re-seeded at the point farthest from its
    centroid.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = len(np.unique(X, axis=0)) if len(X) else 0
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct vectors")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, k, rng)
    assign = np.argmin(_sq_dists(X, C), axis=1)
    trace: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                own = ((X - C[assign]) ** 2).sum(axis=1)
                far = int(np.argmax(own))
                assign[far] = j
                C[j] = X[far]
        # a re-seed can empty the donor cluster; its centroid then stays put
        trace.append(float(((X - C[assign]) ** 2).sum()))
        new_assign = np.argmin(_sq_dists(X, C), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansResult(assign, C, trace, n_iter)
