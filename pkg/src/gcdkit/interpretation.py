"""Novel-cluster decoupling, representative picking and name generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterModel
from .evaluation import hungarian
from .oracle import (
    INTERPRET_TEMPLATE_VERSION,
    CacheStore,
    build_interpret_prompt,
    make_cache_key,
    ask_name,
)

logger = logging.getLogger(__name__)


@dataclass
class ClusterInterpretation:
    cluster: int
    representative_ids: list[int]
    name: str | None


@dataclass
class InterpretationResult:
    novel_clusters: list[int]
    entries: list[ClusterInterpretation]

    def as_dict(self) -> dict:
        return {
            "novel_clusters": self.novel_clusters,
            "entries": [
                {
                    "cluster": e.cluster,
                    "representative_ids": e.representative_ids,
                    "name": e.name,
                }
                for e in self.entries
            ],
        }


def decouple_novel(
    model: ClusterModel,
    labeled_labels: np.ndarray,
    labeled_vectors: np.ndarray,
) -> set[int]:
    """Split off the clusters that do not correspond to any known category.

    One prototype per known category (the mean of its labeled members in
    the representation space) is matched to the nearest cluster centers by
    minimum-cost assignment; unmatched clusters are the novel ones.
    """
    labels = np.asarray(labeled_labels)
    vectors = np.asarray(labeled_vectors, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("decoupling needs labeled samples")
    categories = sorted(set(int(c) for c in labels))
    if model.k < len(categories):
        raise ValueError(
            f"cannot decouple: {model.k} clusters for {len(categories)} known categories"
        )
    prototypes = np.stack([vectors[labels == c].mean(axis=0) for c in categories])
    cost = np.linalg.norm(prototypes[:, None, :] - model.centers[None, :, :], axis=2)
    padded = np.zeros((model.k, model.k))
    padded[: len(categories)] = cost
    perm = hungarian(padded)
    matched = {int(perm[i]) for i in range(len(categories))}
    return set(range(model.k)) - matched


def representatives(
    model: ClusterModel,
    cluster: int,
    vectors: np.ndarray,
    n: int = 3,
    ids: np.ndarray | None = None,
) -> list[int]:
    """The ``n`` cluster members nearest its center, ties by ascending id."""
    if n < 1:
        raise ValueError("n must be at least 1")
    vectors = np.asarray(vectors, dtype=np.float64)
    if ids is None:
        ids = np.arange(vectors.shape[0], dtype=np.int64)
    member_rows = np.flatnonzero(model.pseudo_labels == cluster)
    if member_rows.size == 0:
        raise ValueError(f"cluster {cluster} is empty")
    dists = np.linalg.norm(vectors[member_rows] - model.centers[cluster], axis=1)
    order = np.lexsort((ids[member_rows], dists))
    return [int(ids[member_rows[i]]) for i in order[:n]]


def name_clusters(
    model: ClusterModel,
    novel_clusters: set[int],
    vectors: np.ndarray,
    texts: dict[int, str | None],
    oracle,
    cache: CacheStore,
    ids: np.ndarray | None = None,
    n_reps: int = 3,
) -> InterpretationResult:
    """Generate a name for every novel cluster via the shared oracle cache.

    Clusters whose representatives lack text (or have fewer than three
    members, the template's arity) get no name and are logged.
    """
    entries: list[ClusterInterpretation] = []
    for cluster in sorted(novel_clusters):
        reps = representatives(model, cluster, vectors, n=n_reps, ids=ids)
        rep_texts = [texts.get(r) for r in reps]
        if len(reps) != 3 or any(t is None for t in rep_texts):
            logger.warning("cluster %d: cannot render naming prompt, skipping name", cluster)
            entries.append(ClusterInterpretation(cluster, reps, None))
            continue
        prompt = build_interpret_prompt(rep_texts)
        key = make_cache_key(INTERPRET_TEMPLATE_VERSION, "", rep_texts)
        meta = {"kind": "interpret", "representative_ids": reps}
        answer = ask_name(oracle, prompt, meta, cache, key)
        entries.append(ClusterInterpretation(cluster, reps, answer.text))
    return InterpretationResult(novel_clusters=sorted(novel_clusters), entries=entries)
