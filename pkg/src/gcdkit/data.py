"""Dataset loading, validation, synthesis and labeled/unlabeled/test splitting.

A dataset is a flat list of :class:`EmbeddedSample` records over a shared
vector space, partitioned into three splits:

* ``labeled``:   samples with a known-category label available for training
* ``unlabeled``: the discovery pool (known and novel categories mixed)
* ``test``:      held out, used only for inductive evaluation
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

VALID_SPLITS = ("labeled", "unlabeled", "test")


class DatasetError(ValueError):
    """Raised for malformed records, inconsistent dimensions or bad splits."""


@dataclass
class EmbeddedSample:
    """One data point: an id, a feature vector and optional metadata."""

    id: int
    vector: np.ndarray
    text: str | None = None
    true_label: int | None = None
    split: str = "unlabeled"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise DatasetError(f"sample {self.id}: vector must be 1-D")
        if self.split not in VALID_SPLITS:
            raise DatasetError(f"sample {self.id}: unknown split {self.split!r}")


@dataclass
class DatasetBundle:
    """A validated dataset plus its known/novel category partition."""

    samples: list[EmbeddedSample]
    known_categories: set[int]
    novel_categories: set[int]
    d: int

    def __post_init__(self):
        validate_bundle(self)

    # -- convenience accessors -------------------------------------------------

    def by_split(self, split: str) -> list[EmbeddedSample]:
        return [s for s in self.samples if s.split == split]

    @property
    def labeled(self) -> list[EmbeddedSample]:
        return self.by_split("labeled")

    @property
    def unlabeled(self) -> list[EmbeddedSample]:
        return self.by_split("unlabeled")

    @property
    def test(self) -> list[EmbeddedSample]:
        return self.by_split("test")

    @property
    def discovery_pool(self) -> list[EmbeddedSample]:
        """Labeled plus unlabeled samples, ascending id (the training universe)."""
        pool = [s for s in self.samples if s.split != "test"]
        return sorted(pool, key=lambda s: s.id)

    def vectors(self, samples: list[EmbeddedSample] | None = None) -> np.ndarray:
        rows = self.samples if samples is None else samples
        return np.stack([s.vector for s in rows]) if rows else np.empty((0, self.d))

    def sample_by_id(self, sample_id: int) -> EmbeddedSample:
        return self._index()[sample_id]

    def _index(self) -> dict[int, EmbeddedSample]:
        if not hasattr(self, "_id_index"):
            self._id_index = {s.id: s for s in self.samples}
        return self._id_index


def validate_bundle(bundle: DatasetBundle) -> None:
    if not any(s.split != "test" for s in bundle.samples):
        raise DatasetError("dataset has no labeled or unlabeled samples")
    if bundle.known_categories & bundle.novel_categories:
        raise DatasetError("known and novel category sets overlap")
    seen: set[int] = set()
    for s in bundle.samples:
        if s.id in seen:
            raise DatasetError(f"duplicate sample id {s.id}")
        seen.add(s.id)
        if s.vector.shape[0] != bundle.d:
            raise DatasetError(
                f"sample {s.id}: vector has dimension {s.vector.shape[0]}, expected {bundle.d}"
            )
        if s.split == "labeled":
            if s.true_label is None:
                raise DatasetError(f"labeled sample {s.id} is missing its label")
            if s.true_label in bundle.novel_categories:
                raise DatasetError(
                    f"labeled sample {s.id} carries novel category {s.true_label}"
                )
    if seen != set(range(len(bundle.samples))):
        raise DatasetError("sample ids must be dense in [0, N)")
    if bundle.d < 2:
        raise DatasetError("vector dimension must be at least 2")


def load_jsonl(path) -> DatasetBundle:
    """Load and validate a dataset from a JSONL file.

    Each line holds one record:
    ``{"id": int, "vector": [float...], "text": str?, "label": int?,
    "split": "labeled"|"unlabeled"|"test"}``.
    """
    samples: list[EmbeddedSample] = []
    d: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            try:
                sample = EmbeddedSample(
                    id=int(rec["id"]),
                    vector=np.asarray(rec["vector"], dtype=np.float64),
                    text=rec.get("text"),
                    true_label=rec.get("label"),
                    split=rec.get("split", "unlabeled"),
                )
            except (KeyError, TypeError, ValueError, DatasetError) as exc:
                raise DatasetError(f"line {lineno}: invalid record ({exc})") from exc
            if d is None:
                d = sample.vector.shape[0]
            elif sample.vector.shape[0] != d:
                raise DatasetError(
                    f"line {lineno}: vector has dimension {sample.vector.shape[0]}, "
                    f"expected {d}"
                )
            if sample.split == "labeled" and sample.true_label is None:
                raise DatasetError(f"line {lineno}: labeled record without label field")
            samples.append(sample)
    if d is None:
        raise DatasetError(f"{path}: empty dataset")
    known = {s.true_label for s in samples if s.split == "labeled"}
    seen = {s.true_label for s in samples if s.true_label is not None}
    return DatasetBundle(
        samples=samples,
        known_categories=known,
        novel_categories=seen - known,
        d=d,
    )


def save_jsonl(bundle: DatasetBundle, path) -> None:
    """Serialize a bundle so that :func:`load_jsonl` round-trips it."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in bundle.samples:
            rec: dict = {"id": s.id, "vector": [float(v) for v in s.vector]}
            if s.text is not None:
                rec["text"] = s.text
            if s.true_label is not None:
                rec["label"] = s.true_label
            rec["split"] = s.split
            fh.write(json.dumps(rec) + "\n")


def make_gcd_split(
    samples: list[EmbeddedSample],
    novel_ratio: float,
    labeled_ratio: float,
    seed: int,
) -> DatasetBundle:
    """Partition fully-labeled samples into the category-discovery layout.

    A seeded shuffle of the sorted category list promotes the first
    ``ceil(novel_ratio * n_categories)`` categories to novel; all their
    non-test samples become unlabeled. Every remaining (known) category
    contributes ``max(1, ceil(labeled_ratio * count))`` labeled samples,
    the rest unlabeled. Samples already marked ``test`` pass through
    untouched.
    """
    if not 0 < novel_ratio < 1:
        raise DatasetError("novel_ratio must lie strictly between 0 and 1")
    if not 0 < labeled_ratio <= 1:
        raise DatasetError("labeled_ratio must lie in (0, 1]")
    if any(s.true_label is None for s in samples):
        raise DatasetError("every input sample needs a true label")

    categories = sorted({s.true_label for s in samples})
    if len(categories) < 2:
        raise DatasetError("need at least 2 categories to split")

    rng = np.random.default_rng(seed)
    shuffled = [categories[i] for i in rng.permutation(len(categories))]
    n_novel = math.ceil(novel_ratio * len(categories))
    if n_novel >= len(categories):
        raise DatasetError("novel_ratio leaves no known categories")
    novel = set(shuffled[:n_novel])
    known = set(shuffled[n_novel:])

    out: dict[int, EmbeddedSample] = {}
    for s in samples:
        split = s.split
        if split != "test":
            split = "unlabeled"
        out[s.id] = EmbeddedSample(s.id, s.vector.copy(), s.text, s.true_label, split)

    for cat in sorted(known):
        pool = sorted(s.id for s in samples if s.true_label == cat and s.split != "test")
        if not pool:
            raise DatasetError(f"known category {cat} has no non-test samples")
        n_lab = max(1, math.ceil(labeled_ratio * len(pool)))
        chosen = rng.permutation(len(pool))[:n_lab]
        for idx in chosen:
            out[pool[idx]].split = "labeled"

    ordered = [out[s.id] for s in samples]
    d = ordered[0].vector.shape[0]
    return DatasetBundle(samples=ordered, known_categories=known, novel_categories=novel, d=d)


def gen_synthetic(
    num_categories: int,
    per_category: int,
    d: int,
    separation: float,
    noise_sigma: float,
    seed: int,
    test_fraction: float = 0.2,
) -> list[EmbeddedSample]:
    """Generate Gaussian category blobs around centers on a sphere.

    One center per category is drawn uniformly on the sphere of radius
    ``separation``; each category then gets ``per_category`` points with
    isotropic noise ``noise_sigma``. The trailing ``test_fraction`` of every
    category is marked as the test split, the remainder stays unlabeled
    until :func:`make_gcd_split` runs.
    """
    if num_categories < 2:
        raise DatasetError("num_categories must be at least 2")
    if per_category < 2:
        raise DatasetError("per_category must be at least 2")
    if separation <= 0:
        raise DatasetError("separation must be positive")
    if noise_sigma < 0:
        raise DatasetError("noise_sigma must be non-negative")

    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_categories, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation

    n_test = int(round(test_fraction * per_category))
    samples: list[EmbeddedSample] = []
    next_id = 0
    for cat in range(num_categories):
        points = centers[cat] + rng.normal(scale=noise_sigma, size=(per_category, d))
        for i in range(per_category):
            split = "test" if i >= per_category - n_test else "unlabeled"
            samples.append(
                EmbeddedSample(id=next_id, vector=points[i], true_label=cat, split=split)
            )
            next_id += 1
    return samples
