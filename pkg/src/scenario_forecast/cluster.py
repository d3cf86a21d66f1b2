"""K-means scenario clustering with silhouette-driven k selection.

Implemented directly on numpy rather than delegating to a library so the
reproducibility contract is airtight: k-means++ seeding with one private RNG
per restart, nearest-centroid ties resolved to the lowest index, empty
clusters reseeded at the point farthest from its assigned centroid, and
identical results for identical (matrix, k, seed, restarts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ClusteringError(ValueError):
    """Clustering preconditions not met (e.g. too few day windows)."""


@dataclass(frozen=True, eq=False)
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,)
    inertia: float
    seed: int
    inertia_trace: tuple = ()  # per-Lloyd-iteration inertia of the winning restart


@dataclass(frozen=True)
class ClusterQuality:
    silhouette: float
    calinski_harabasz: float
    davies_bouldin: float


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _seed_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=float)
    centroids[0] = points[int(rng.integers(n))]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _repair_empty(points, centroids, assignments, d2):
    """Reseed each empty cluster at the point farthest from its own centroid."""
    k = centroids.shape[0]
    own = d2[np.arange(len(points)), assignments].copy()
    for c in range(k):
        if np.any(assignments == c):
            continue
        far = int(np.argmax(own))
        centroids[c] = points[far]
        assignments[far] = c
        own[far] = 0.0
    return centroids, assignments


def _lloyd(points, centroids, max_iter):
    assignments = None
    trace = []
    centroids = centroids.copy()
    for _ in range(max_iter):
        d2 = _sq_distances(points, centroids)
        new_assignments = np.argmin(d2, axis=1)  # ties -> lowest index
        centroids, new_assignments = _repair_empty(points, centroids, new_assignments, d2)
        inertia = float(
            np.sum((points - centroids[new_assignments]) ** 2)
        )
        trace.append(inertia)
        if assignments is not None and np.array_equal(assignments, new_assignments):
            assignments = new_assignments
            break
        assignments = new_assignments
        for c in range(centroids.shape[0]):
            centroids[c] = points[assignments == c].mean(axis=0)
    return centroids, assignments, trace


def kmeans_fit(matrix, k: int, seed: int = 0, max_iter: int = 300, n_restarts: int = 10) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_restarts``.

    Restart ``r`` owns the RNG derived from ``(seed, r)``, so serial and
    parallel schedules would produce identical models.
    """
    points = np.asarray(matrix, dtype=float)
    if points.ndim != 2:
        raise ValueError("matrix must be 2-D")
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"{n} rows cannot support k={k}")

    best = None
    for restart in range(max(1, n_restarts)):
        rng = np.random.default_rng([seed, restart])
        centroids = _seed_plus_plus(points, k, rng)
        centroids, assignments, trace = _lloyd(points, centroids, max_iter)
        inertia = trace[-1]
        if best is None or inertia < best[0]:
            best = (inertia, centroids, assignments, trace)

    inertia, centroids, assignments, trace = best
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments.astype(int),
        inertia=inertia,
        seed=seed,
        inertia_trace=tuple(trace),
    )


def _cluster_members(labels):
    labels = np.asarray(labels)
    return {c: np.flatnonzero(labels == c) for c in np.unique(labels)}


def silhouette_score(matrix, assignments) -> float:
    """Mean of (b - a)/max(a, b); singleton and zero-distance points score 0."""
    points = np.asarray(matrix, dtype=float)
    members = _cluster_members(assignments)
    if len(members) < 2:
        raise ValueError("silhouette needs at least 2 distinct clusters")

    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))

    labels = np.asarray(assignments)
    scores = np.empty(len(points))
    for i in range(len(points)):
        own = members[labels[i]]
        if own.size == 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (own.size - 1)
        b = min(
            dist[i, idx].mean() for c, idx in members.items() if c != labels[i]
        )
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def calinski_harabasz(matrix, assignments) -> float:
    """Between/within dispersion ratio scaled by (N - k)/(k - 1)."""
    points = np.asarray(matrix, dtype=float)
    members = _cluster_members(assignments)
    n, k = len(points), len(members)
    if k < 2 or k >= n:
        raise ValueError(f"calinski-harabasz needs 2 <= k < N (k={k}, N={n})")
    overall = points.mean(axis=0)
    between = 0.0
    within = 0.0
    for idx in members.values():
        centroid = points[idx].mean(axis=0)
        between += idx.size * float(np.sum((centroid - overall) ** 2))
        within += float(np.sum((points[idx] - centroid) ** 2))
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def davies_bouldin(matrix, assignments) -> float:
    """Mean over clusters of the worst (sigma_i + sigma_j)/d(c_i, c_j).

    Coincident centroids yield the documented +infinity sentinel.
    """
    points = np.asarray(matrix, dtype=float)
    members = _cluster_members(assignments)
    k = len(members)
    if k < 2:
        raise ValueError("davies-bouldin needs at least 2 distinct clusters")
    centroids = []
    sigmas = []
    for idx in members.values():
        centroid = points[idx].mean(axis=0)
        centroids.append(centroid)
        sigmas.append(float(np.mean(np.sqrt(np.sum((points[idx] - centroid) ** 2, axis=1)))))
    worst = []
    for i in range(k):
        r = 0.0
        for j in range(k):
            if i == j:
                continue
            d = math.sqrt(float(np.sum((centroids[i] - centroids[j]) ** 2)))
            r = max(r, math.inf if d == 0.0 else (sigmas[i] + sigmas[j]) / d)
        worst.append(r)
    return float(np.mean(worst))


def cluster_quality(matrix, assignments) -> ClusterQuality:
    return ClusterQuality(
        silhouette=silhouette_score(matrix, assignments),
        calinski_harabasz=calinski_harabasz(matrix, assignments),
        davies_bouldin=davies_bouldin(matrix, assignments),
    )


def select_k(matrix, k_min: int = 2, k_max: int = 8, seed: int = 0,
             max_iter: int = 300, n_restarts: int = 10):
    """Fit k-means over a k range and pick the silhouette argmax.

    Returns ``(best_k, curve)`` with ``curve`` a list of ``(k, silhouette)``
    pairs for plotting.  Ties go to the smaller k.
    """
    points = np.asarray(matrix, dtype=float)
    n = points.shape[0]
    if not 2 <= k_min <= k_max <= n - 1:
        raise ValueError(f"need 2 <= k_min <= k_max <= N-1 (k_min={k_min}, k_max={k_max}, N={n})")
    curve = []
    best_k, best_score = None, -math.inf
    for k in range(k_min, k_max + 1):
        model = kmeans_fit(points, k, seed=seed, max_iter=max_iter, n_restarts=n_restarts)
        score = silhouette_score(points, model.assignments)
        curve.append((k, score))
        if score > best_score:
            best_k, best_score = k, score
    return best_k, curve


def assign_nearest(model: ClusterModel, feature, params) -> int:
    """Index of the nearest centroid for one (raw) feature vector."""
    values = getattr(feature, "values", feature)
    normalized = params.apply(values)
    if normalized.shape[-1] != model.centroids.shape[1]:
        raise ValueError(
            f"feature dimension {normalized.shape[-1]} does not match centroids "
            f"({model.centroids.shape[1]})"
        )
    d2 = np.sum((model.centroids - normalized) ** 2, axis=1)
    return int(np.argmin(d2))


def contingency_table(assignments, labels) -> dict:
    """Cluster-vs-label counts, keyed ``{cluster: {label: count}}``."""
    table: dict = {}
    for a, l in zip(assignments, labels):
        table.setdefault(int(a), {}).setdefault(str(l), 0)
        table[int(a)][str(l)] += 1
    return table


def cluster_purity(assignments, labels) -> float:
    """Fraction of points whose cluster's majority label matches their own."""
    table = contingency_table(assignments, labels)
    total = sum(sum(counts.values()) for counts in table.values())
    majority = sum(max(counts.values()) for counts in table.values())
    return majority / total
