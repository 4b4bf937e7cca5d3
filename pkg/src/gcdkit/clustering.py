"""KMeans over the representation space and category-count estimation.

The Lloyd loop is written out explicitly (rather than delegated to a
library) because downstream checks need the per-iteration inertia trace
and a reproducible empty-cluster repair rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusterModel:
    """K centers plus the pseudo label and inertia of the fitted assignment."""

    k: int
    centers: np.ndarray          # (K, d)
    pseudo_labels: np.ndarray    # (N,) int, nearest-center assignment
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    all_histories: list[list[float]] = field(default_factory=list)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.pseudo_labels, minlength=self.k)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (N, K), clipped at zero."""
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * x @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding: per step, sample a few candidates by the
    squared-distance distribution and keep the one with the lowest potential."""
    n = x.shape[0]
    n_trials = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = centers[0]
            break
        cand = rng.choice(n, size=n_trials, p=d2 / total)
        best_pot, best_d2, best_j = np.inf, None, None
        for j in cand:
            nd2 = np.minimum(d2, ((x - x[j]) ** 2).sum(axis=1))
            pot = nd2.sum()
            if pot < best_pot:
                best_pot, best_d2, best_j = pot, nd2, j
        centers[i] = x[best_j]
        d2 = best_d2
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    """Run Lloyd iterations; returns (centers, labels, inertia, history)."""
    n, k = x.shape[0], centers.shape[0]
    history: list[float] = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new_centers = centers.copy()
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            # reseed each empty cluster at the point farthest from its
            # assigned center; never reuse a point twice in one repair pass
            dist_to_own = d2[np.arange(n), labels]
            order = np.argsort(-dist_to_own, kind="stable")
            for rank, c in enumerate(empties):
                if rank < n:
                    new_centers[c] = x[order[rank]]
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    history.append(inertia)
    return centers, labels, inertia, history


def kmeans(
    vectors: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
    ids: np.ndarray | None = None,
) -> ClusterModel:
    """Lloyd's algorithm from greedy k-means++ seeds, best of ``n_init`` runs.

    All arithmetic runs over rows sorted by ``ids`` (ascending sample id by
    default), so a permutation of the input rows yields identical centers
    and correspondingly permuted pseudo labels.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("vectors must be a non-empty 2-D matrix")
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if tol < 0:
        raise ValueError("tol must be non-negative")

    if ids is None:
        order = np.arange(n)
    else:
        order = np.argsort(np.asarray(ids), kind="stable")
    xc = x[order]

    rng = np.random.default_rng(seed)
    best = None
    all_histories: list[list[float]] = []
    for _ in range(max(1, n_init)):
        centers0 = _kmeans_pp_init(xc, k, rng)
        centers, labels_c, inertia, history = _lloyd(xc, centers0, max_iter, tol)
        all_histories.append(history)
        if best is None or inertia < best[2]:
            best = (centers, labels_c, inertia, history)
    centers, labels_c, inertia, history = best

    labels = np.empty(n, dtype=np.int64)
    labels[order] = labels_c
    return ClusterModel(
        k=k,
        centers=centers,
        pseudo_labels=labels,
        inertia=inertia,
        inertia_history=history,
        all_histories=all_histories,
    )


def estimate_k(
    vectors: np.ndarray,
    k_max: int,
    drop_factor: float = 0.5,
    seed: int = 0,
    **kmeans_kwargs,
) -> int:
    """Estimate the category count by over-clustering and dropping small clusters.

    Clusters at ``k_max`` and counts those whose size reaches
    ``drop_factor * (N / k_max)``, the fraction of the expected uniform
    cluster size a real category should retain.
    """
    if not 0 < drop_factor < 1:
        raise ValueError("drop_factor must lie strictly between 0 and 1")
    x = np.asarray(vectors, dtype=np.float64)
    model = kmeans(x, k_max, seed=seed, **kmeans_kwargs)
    threshold = drop_factor * (x.shape[0] / k_max)
    return int((model.cluster_sizes() >= threshold).sum())
