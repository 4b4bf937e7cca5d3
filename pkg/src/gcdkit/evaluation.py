"""Hungarian-aligned clustering accuracy, known/novel split and H-score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class EvalReport:
    """Accuracy decomposition after aligning clusters to true categories."""

    mapping: dict[int, int]        # cluster id -> matched category id
    acc_known: float | None
    acc_novel: float | None
    h_score: float | None
    acc_overall: float

    def as_dict(self) -> dict:
        return {
            "acc_known": self.acc_known,
            "acc_novel": self.acc_novel,
            "h_score": self.h_score,
            "acc_overall": self.acc_overall,
            "mapping": {str(k): v for k, v in sorted(self.mapping.items())},
        }


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Exact minimum-cost perfect assignment of a square cost matrix.

    Returns ``perm`` with ``perm[i]`` the column assigned to row ``i``.
    Rectangular inputs are rejected; pad with zero rows or columns first.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def evaluate(pred, truth, known) -> EvalReport:
    """Align predicted clusters to true categories and score the result.

    The confusion matrix is zero-padded to a square so that surplus
    clusters match dummy categories (contributing no correct mass), then
    matched mass is maximized via the assignment solver. Accuracies are
    split by whether a sample's true category is known or novel; the
    H-score is their harmonic mean.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.size == 0 or pred.shape != truth.shape:
        raise ValueError("pred and truth must be aligned and non-empty")
    known = set(int(c) for c in known)

    clusters = sorted(set(pred.tolist()))
    categories = sorted(set(truth.tolist()))
    n = max(len(clusters), len(categories))
    cluster_pos = {c: i for i, c in enumerate(clusters)}
    cat_pos = {c: i for i, c in enumerate(categories)}

    counts = np.zeros((n, n), dtype=np.float64)
    for p, t in zip(pred, truth):
        counts[cluster_pos[p], cat_pos[t]] += 1.0

    perm = hungarian(-counts)
    mapping = {
        clusters[i]: categories[perm[i]]
        for i in range(len(clusters))
        if perm[i] < len(categories)
    }

    matched = np.array([mapping.get(int(p)) == int(t) for p, t in zip(pred, truth)])
    known_mask = np.array([int(t) in known for t in truth])

    acc_overall = float(matched.mean())
    acc_known = float(matched[known_mask].mean()) if known_mask.any() else None
    acc_novel = float(matched[~known_mask].mean()) if (~known_mask).any() else None
    if acc_known is None or acc_novel is None:
        h = None
    elif acc_known + acc_novel > 0:
        h = 2.0 * acc_known * acc_novel / (acc_known + acc_novel)
    else:
        h = 0.0
    return EvalReport(
        mapping=mapping,
        acc_known=acc_known,
        acc_novel=acc_novel,
        h_score=h,
        acc_overall=acc_overall,
    )
