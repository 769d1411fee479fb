"""K-means grouping of subject-level context vectors.

Seeding is k-means++ and iteration is plain Lloyd. Points are processed in a
canonical (lexicographic) order, so permuting the input leaves the seeded
result unchanged. Ties in assignment go to the lowest centroid index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray                  # (k, d)
    assignment: dict[int, int]             # subject_id -> cluster index
    inertia: float                         # sum of squared distances

    def group_subjects(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {i: [] for i in range(self.k)}
        for sid, c in self.assignment.items():
            groups[c].append(sid)
        return groups


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :])**2).sum(axis=2)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0])**2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = points[rng.integers(n, size=k - i)]
            break
        probs = d2 / total
        centroids[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[i])**2).sum(axis=1))
    return centroids


def fit_kmeans(points: dict[int, np.ndarray], k: int, seed: int = 0,
               max_iter: int = 300, tol: float = 1e-10) -> ClusterModel:
    """Cluster subject vectors into k groups.

    points maps subject_id to a context vector; requires k >= 1 and at least
    k distinct points to produce k non-degenerate groups.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(points) < k:
        raise ValueError(f"need at least k={k} subjects, got {len(points)}")
    ids = list(points.keys())
    mat = np.array([np.asarray(points[i], dtype=np.float64) for i in ids])

    # canonical ordering makes the seeded result input-order invariant
    order = np.lexsort(mat.T[::-1])
    mat_sorted = mat[order]
    ids_sorted = [ids[i] for i in order]

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(mat_sorted, k, rng)
    labels = np.zeros(len(mat_sorted), dtype=int)
    for _ in range(max_iter):
        d2 = _sq_dists(mat_sorted, centroids)
        labels = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        new_centroids = centroids.copy()
        for c in range(k):
            members = mat_sorted[labels == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        shift = float(((new_centroids - centroids)**2).sum())
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _sq_dists(mat_sorted, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(labels)), labels].sum())
    assignment = {sid: int(lbl) for sid, lbl in zip(ids_sorted, labels)}
    return ClusterModel(k=k, centroids=centroids, assignment=assignment,
                        inertia=inertia)


def assign(model: ClusterModel, vector: np.ndarray) -> int:
    """Nearest-centroid group for a new context vector (lowest index on ties)."""
    v = np.asarray(vector, dtype=np.float64)
    d2 = ((model.centroids - v[None, :])**2).sum(axis=1)
    return int(d2.argmin())


def kmeans_objective(points: dict[int, np.ndarray], model: ClusterModel) -> float:
    ids = list(points.keys())
    mat = np.array([points[i] for i in ids])
    labels = np.array([model.assignment[i] for i in ids])
    return float(((mat - model.centroids[labels])**2).sum())


def elbow_inertias(points: dict[int, np.ndarray], k_range, seed: int = 0) -> dict[int, float]:
    """Inertia per candidate k; logged to help choose k when unknown."""
    return {k: fit_kmeans(points, k, seed=seed).inertia for k in k_range}
