"""Neighbor retrieval and query-set selection.

The main selection rule intersects the top-m samples by neighborhood
inconsistency (how many of a sample's nearest neighbors carry a different
pseudo label) with the top-m by cluster-assignment entropy. Classic
uncertainty baselines (entropy-only, margin, least-confidence, random)
share the same interface for benchmarking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class NeighborIndex:
    """Per-sample top-k neighbor ids, ordered by descending cosine similarity."""

    k: int
    neighbors: np.ndarray      # (N, k) int
    similarities: np.ndarray   # (N, k) float


@dataclass
class SamplingScores:
    """Per-sample selection signals for one embedding snapshot."""

    inconsistency: np.ndarray      # (N,) int in [0, k]
    entropy: np.ndarray            # (N,) float in [0, ln K]
    assignment_probs: np.ndarray   # (N, K) rows summing to 1


@dataclass
class SelectionSet:
    """The chosen query ids together with the configured budget."""

    ids: frozenset[int]
    m: int

    def __post_init__(self):
        self.ids = frozenset(int(i) for i in self.ids)
        if len(self.ids) > self.m:
            raise ValueError("selection exceeds its budget")


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two non-zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return float(a @ b / (na * nb))


def build_knn(vectors: np.ndarray, k: int, block: int = 1024) -> NeighborIndex:
    """Exact brute-force k-nearest-neighbor index under cosine similarity.

    Ties are broken by ascending sample id; each sample's own id is
    excluded. ``k >= N`` is clamped to ``N - 1`` with a warning.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to build a neighbor index")
    if k < 1:
        raise ValueError("k must be at least 1")
    if k >= n:
        warnings.warn(f"k={k} >= N={n}; clamping to {n - 1}", stacklevel=2)
        k = n - 1
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm vectors cannot be indexed by cosine similarity")
    xn = x / norms

    neighbors = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k), dtype=np.float64)
    ids = np.arange(n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        s = xn[start:stop] @ xn.T
        s[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # order by similarity descending, ties by ascending id
        order = np.lexsort((np.broadcast_to(ids, s.shape), -s), axis=1)[:, :k]
        neighbors[start:stop] = order
        sims[start:stop] = np.take_along_axis(s, order, axis=1)
    return NeighborIndex(k=k, neighbors=neighbors, similarities=sims)


def local_inconsistency(pseudo_labels: np.ndarray, index: NeighborIndex) -> np.ndarray:
    """Count, per sample, the neighbors whose pseudo label differs from its own."""
    labels = np.asarray(pseudo_labels)
    return (labels[index.neighbors] != labels[:, None]).sum(axis=1)


def soft_assign(z: np.ndarray, centers: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Student-t kernel cluster-membership probabilities.

    Accepts a single vector or a matrix of rows; each output row is a
    strictly positive distribution over the K centers.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    if not (np.isfinite(zz).all() and np.isfinite(centers).all()):
        raise ValueError("soft assignment requires finite inputs")
    d2 = ((zz[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    kernel = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    q = kernel / kernel.sum(axis=1, keepdims=True)
    return q[0] if single else q


def entropy(q: np.ndarray) -> np.ndarray | float:
    """Natural-log entropy of probability rows, with 0*ln(0) treated as 0."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qq = q[None, :] if single else q
    terms = np.where(qq > 0.0, qq * np.log(np.where(qq > 0.0, qq, 1.0)), 0.0)
    h = -terms.sum(axis=1)
    return float(h[0]) if single else h


def compute_scores(
    z: np.ndarray,
    centers: np.ndarray,
    index: NeighborIndex,
    pseudo_labels: np.ndarray,
    alpha: float = 1.0,
) -> SamplingScores:
    """Bundle the per-sample selection signals for one snapshot."""
    q = soft_assign(z, centers, alpha)
    return SamplingScores(
        inconsistency=local_inconsistency(pseudo_labels, index),
        entropy=entropy(q),
        assignment_probs=q,
    )


def _eligible_array(eligible, n: int) -> np.ndarray:
    ids = np.array(sorted(int(i) for i in eligible), dtype=np.int64)
    if ids.size and (ids[0] < 0 or ids[-1] >= n):
        raise ValueError("eligible ids out of range")
    return ids


def select(c: np.ndarray, h: np.ndarray, m: int, eligible) -> SelectionSet:
    """Intersect the top-m ids by inconsistency with the top-m by entropy.

    Rankings run over the eligible ids only. Ties inside each ranking are
    broken by the other score (descending), then by ascending id. The
    intersection may hold fewer than ``m`` ids.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    c = np.asarray(c, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    ids = _eligible_array(eligible, c.shape[0])
    by_c = ids[np.lexsort((ids, -h[ids], -c[ids]))[:m]]
    by_h = ids[np.lexsort((ids, -c[ids], -h[ids]))[:m]]
    return SelectionSet(ids=frozenset(by_c) & frozenset(by_h), m=m)


def select_entropy(h: np.ndarray, m: int, eligible) -> SelectionSet:
    h = np.asarray(h, dtype=np.float64)
    ids = _eligible_array(eligible, h.shape[0])
    top = ids[np.lexsort((ids, -h[ids]))[:m]]
    return SelectionSet(ids=frozenset(top), m=m)


def select_margin(probs: np.ndarray, m: int, eligible) -> SelectionSet:
    """Smallest gap between the two largest predicted probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    ids = _eligible_array(eligible, probs.shape[0])
    part = np.sort(probs[ids], axis=1)
    margin = part[:, -1] - part[:, -2]
    top = ids[np.lexsort((ids, margin))[:m]]
    return SelectionSet(ids=frozenset(top), m=m)


def select_confidence(probs: np.ndarray, m: int, eligible) -> SelectionSet:
    """Smallest maximum predicted probability (least confidence)."""
    probs = np.asarray(probs, dtype=np.float64)
    ids = _eligible_array(eligible, probs.shape[0])
    conf = probs[ids].max(axis=1)
    top = ids[np.lexsort((ids, conf))[:m]]
    return SelectionSet(ids=frozenset(top), m=m)


def select_random(m: int, eligible, rng: np.random.Generator) -> SelectionSet:
    ids = np.array(sorted(int(i) for i in eligible), dtype=np.int64)
    take = min(m, ids.size)
    chosen = rng.choice(ids, size=take, replace=False)
    return SelectionSet(ids=frozenset(chosen), m=m)


STRATEGIES = ("lis", "entropy", "margin", "confidence", "random")


def select_strategy(
    name: str,
    scores: SamplingScores,
    m: int,
    eligible,
    rng: np.random.Generator | None = None,
    classifier_probs: np.ndarray | None = None,
) -> SelectionSet:
    """Dispatch one of the named selection strategies.

    ``margin`` and ``confidence`` are the classic classifier-uncertainty
    rules and read the supervised classifier's softmax when provided,
    falling back to the cluster-assignment distribution otherwise.
    """
    if name == "lis":
        return select(scores.inconsistency, scores.entropy, m, eligible)
    if name == "entropy":
        return select_entropy(scores.entropy, m, eligible)
    if name == "margin":
        probs = scores.assignment_probs if classifier_probs is None else classifier_probs
        return select_margin(probs, m, eligible)
    if name == "confidence":
        probs = scores.assignment_probs if classifier_probs is None else classifier_probs
        return select_confidence(probs, m, eligible)
    if name == "random":
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return select_random(m, eligible, rng)
    raise ValueError(f"unknown strategy {name!r}")
