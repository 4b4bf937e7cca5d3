"""Projection head, contrastive objective and the discovery training loop.

The representation is a frozen input embedding composed with a trainable
two-layer head. All gradients are derived by hand over numpy arrays: the
neighborhood contrastive loss pulls each sample toward its assigned
positive (an oracle-confirmed candidate for selected samples, a random
neighbor otherwise) against all augmented batch members, and a softmax
cross-entropy term supervises the known categories.

Clusters, neighbor lists and query selections are recomputed from a fresh
embedding snapshot only every ``refresh_interval`` epochs; everything in
between reuses that snapshot.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import oracle as oracle_mod
from .clustering import ClusterModel, kmeans
from .data import DatasetBundle
from .evaluation import evaluate
from .oracle import CacheStore, OracleExchange, ask, build_exchange, effective_text
from .sampling import (
    NeighborIndex,
    SamplingScores,
    SelectionSet,
    build_knn,
    compute_scores,
    select,
)

SOURCE_LLM = "llm-refined"
SOURCE_RANDOM = "random-knn"


class NumericError(RuntimeError):
    """Raised when a loss or parameter turns non-finite during training."""


# ---------------------------------------------------------------------------
# Projection head
# ---------------------------------------------------------------------------


@dataclass
class ProjectionHead:
    """Two affine layers with a tanh in between, plus a linear classifier.

    ``forward`` maps input embeddings (d) to the representation space
    (d_out); the classifier head maps representations to known-category
    logits and is only consulted by the cross-entropy term.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc")

    @classmethod
    def init(
        cls,
        d: int,
        d_out: int,
        n_classes: int,
        rng: np.random.Generator,
        input_stats: tuple[np.ndarray, np.ndarray] | None = None,
        gain: float = 0.5,
        init_noise: float = 0.1,
    ) -> "ProjectionHead":
        """Seeded near-identity initialization.

        The frozen input embedding is the only structural prior available,
        so the head starts as (almost) an isometry of it: the first layer
        is a scaled, lightly perturbed identity whose gain keeps the tanh
        in its linear region, the second is a semi-orthogonal projection
        undoing the gain. ``input_stats`` (per-dimension mean and std of
        the training inputs) is folded into the first affine layer so the
        activations are unit-scale regardless of the embedding's scale.
        """
        w1 = gain * (np.eye(d) + init_noise * rng.normal(size=(d, d)) / np.sqrt(d))
        b1 = np.zeros(d)
        if input_stats is not None:
            mean, std = input_stats
            std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)
            b1 = b1 - (np.asarray(mean, dtype=np.float64) / std) @ w1
            w1 = w1 / std[:, None]
        basis, _ = np.linalg.qr(rng.normal(size=(d, max(d_out, 1))))
        return cls(
            w1=w1,
            b1=b1,
            w2=basis[:, :d_out] / gain,
            b2=np.zeros(d_out),
            wc=rng.normal(scale=1.0 / np.sqrt(d_out), size=(d_out, n_classes)),
            bc=np.zeros(n_classes),
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def check_finite(self) -> None:
        for name, value in self.params().items():
            if not np.isfinite(value).all():
                raise NumericError(f"parameter {name} turned non-finite")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xx = x[None, :] if single else x
        z = np.tanh(xx @ self.w1 + self.b1) @ self.w2 + self.b2
        return z[0] if single else z

    def _forward_cache(self, x: np.ndarray):
        hidden = np.tanh(x @ self.w1 + self.b1)
        z = hidden @ self.w2 + self.b2
        return z, hidden

    def backward(self, x: np.ndarray, hidden: np.ndarray, dz: np.ndarray) -> dict[str, np.ndarray]:
        dw2 = hidden.T @ dz
        db2 = dz.sum(axis=0)
        dh = dz @ self.w2.T
        dpre = dh * (1.0 - hidden * hidden)
        return {
            "w1": x.T @ dpre,
            "b1": dpre.sum(axis=0),
            "w2": dw2,
            "b2": db2,
        }

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.wc + self.bc


def forward(head: ProjectionHead, x: np.ndarray) -> np.ndarray:
    """Map an input embedding (or a stack of them) through the head."""
    return head.forward(x)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _draw_augment(rng: np.random.Generator, shape, sigma: float, drop: float):
    """One augmentation draw: Gaussian noise, then a keep-mask per coordinate."""
    noise = rng.normal(scale=sigma, size=shape)
    mask = rng.random(shape) >= drop
    return noise, mask


def augment(z: np.ndarray, rng: np.random.Generator, sigma: float, drop: float) -> np.ndarray:
    """Add isotropic Gaussian noise, then zero each coordinate with prob ``drop``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not 0 <= drop < 1:
        raise ValueError("drop must lie in [0, 1)")
    z = np.asarray(z, dtype=np.float64)
    noise, mask = _draw_augment(rng, z.shape, sigma, drop)
    return np.where(mask, z + noise, 0.0)


def _l2_rows(v: np.ndarray) -> np.ndarray:
    return np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def rncl_loss(
    anchor_views: np.ndarray,
    key_views: np.ndarray,
    positives: np.ndarray,
    n_anchors: int,
    tau: float,
):
    """Neighborhood contrastive loss over augmented views.

    Rows ``[0, n_anchors)`` are the batch anchors; all rows act as keys
    (appended rows hold positives living outside the batch). For anchor
    ``i`` the target is ``exp(a_i . k_{p_i} / tau)`` against the sum of
    ``exp(a_i . k_j / tau)`` over every key row, the anchor's own key view
    included. Log-sum-exp is computed with max subtraction.

    Returns ``(loss, d_anchor_views, d_key_views)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if n_anchors < 2:
        raise ValueError("contrastive batches need at least 2 anchors")
    anchors = anchor_views[:n_anchors]
    pos = np.asarray(positives[:n_anchors], dtype=np.int64)
    logits = anchors @ key_views.T / tau
    peak = logits.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=1))
    rows = np.arange(n_anchors)
    loss = float((lse - logits[rows, pos]).mean())

    soft = np.exp(logits - lse[:, None])
    grad_logits = soft
    grad_logits[rows, pos] -= 1.0
    grad_logits /= n_anchors
    d_anchor = np.zeros_like(anchor_views)
    d_anchor[:n_anchors] = grad_logits @ key_views / tau
    d_key = grad_logits.T @ anchors / tau
    return loss, d_anchor, d_key


def contrastive_objective(
    head: ProjectionHead,
    x_rows: np.ndarray,
    positives: np.ndarray,
    n_anchors: int,
    tau: float,
    anchor_noise: np.ndarray,
    anchor_mask: np.ndarray,
    key_noise: np.ndarray,
    key_mask: np.ndarray,
    normalize: bool = True,
):
    """Contrastive loss and head-parameter gradients for one batch.

    Each embedded row receives two independent augmentation draws (anchor
    view and key view). Views are length-normalized before the dot
    products, which keeps the temperature on a cosine scale.
    """
    z, hidden = head._forward_cache(x_rows)
    va_raw = np.where(anchor_mask, z + anchor_noise, 0.0)
    vk_raw = np.where(key_mask, z + key_noise, 0.0)
    if normalize:
        na = _l2_rows(va_raw)
        nk = _l2_rows(vk_raw)
        va = va_raw / na
        vk = vk_raw / nk
    else:
        va, vk = va_raw, vk_raw

    loss, d_va, d_vk = rncl_loss(va, vk, positives, n_anchors, tau)

    if normalize:
        d_va_raw = (d_va - va * (va * d_va).sum(axis=1, keepdims=True)) / na
        d_vk_raw = (d_vk - vk * (vk * d_vk).sum(axis=1, keepdims=True)) / nk
    else:
        d_va_raw, d_vk_raw = d_va, d_vk
    dz = np.where(anchor_mask, d_va_raw, 0.0) + np.where(key_mask, d_vk_raw, 0.0)
    grads = head.backward(x_rows, hidden, dz)
    return loss, grads


def ce_loss(head: ProjectionHead, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy of the classifier head on labeled rows.

    ``y`` holds class indices in ``[0, n_classes)``. Returns the loss and
    gradients for every head parameter including the classifier.
    """
    y = np.asarray(y, dtype=np.int64)
    n_classes = head.wc.shape[1]
    if y.size == 0:
        raise ValueError("cross-entropy needs a non-empty batch")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("label outside the known-category range")
    z, hidden = head._forward_cache(x)
    logits = head.logits(z)
    peak = logits.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=1))
    rows = np.arange(x.shape[0])
    loss = float((lse - logits[rows, y]).mean())

    probs = np.exp(logits - lse[:, None])
    dlogits = probs
    dlogits[rows, y] -= 1.0
    dlogits /= x.shape[0]
    grads = head.backward(x, hidden, dlogits @ head.wc.T)
    grads["wc"] = z.T @ dlogits
    grads["bc"] = dlogits.sum(axis=0)
    return loss, grads


def add_grads(*grad_dicts: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    total: dict[str, np.ndarray] = {}
    for grads in grad_dicts:
        for name, g in grads.items():
            total[name] = total[name] + g if name in total else g.copy()
    return total


class Adam:
    """Adam update rule with constant learning rate."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, head: ProjectionHead, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            param = getattr(head, name)
            setattr(head, name, param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


# ---------------------------------------------------------------------------
# Neighbor assignment
# ---------------------------------------------------------------------------


@dataclass
class NeighborAssignment:
    """Per-row positive sample id and how it was obtained."""

    positive_ids: np.ndarray   # (N,) sample ids
    source: np.ndarray         # (N,) SOURCE_LLM or SOURCE_RANDOM

    @property
    def refined_count(self) -> int:
        return int((self.source == SOURCE_LLM).sum())


def assign_neighbors(
    selection: SelectionSet,
    exchanges: dict[int, OracleExchange],
    index: NeighborIndex,
    rng: np.random.Generator,
    ids: np.ndarray | None = None,
) -> NeighborAssignment:
    """Draw this epoch's positive for every sample.

    Selected samples whose exchange ended in a choice keep that exact
    candidate; abstained and unselected samples draw uniformly from their
    neighbor list, freshly on every call.
    """
    n = index.neighbors.shape[0]
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    refined: dict[int, int] = {}
    for sid in selection.ids:
        exch = exchanges.get(sid)
        if exch is None:
            raise ValueError(f"selected sample {sid} has no exchange")
        if exch.answer is not None and exch.answer.choice is not None:
            refined[sid] = exch.candidates[exch.answer.choice - 1][0]
    k = index.neighbors.shape[1]
    positives = np.empty(n, dtype=np.int64)
    source = np.empty(n, dtype="<U11")
    for row in range(n):
        sid = int(ids[row])
        if sid in refined:
            positives[row] = refined[sid]
            source[row] = SOURCE_LLM
        else:
            positives[row] = ids[index.neighbors[row, int(rng.integers(k))]]
            source[row] = SOURCE_RANDOM
        if positives[row] == sid:
            raise ValueError(f"sample {sid} assigned itself as positive")
    return NeighborAssignment(positive_ids=positives, source=source)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Hyperparameters of the discovery loop.

    The defaults mirror the published text-benchmark settings; desk-scale
    experiments usually override the learning rates and epoch counts (see
    ``gcdkit.config.reference_train_config``).
    """

    tau: float = 0.07
    alpha: float = 1.0
    k_neighbors: int = 50
    budget: int = 500
    q_size: int = 2
    pretrain_epochs: int = 100
    train_epochs: int = 50
    refresh_interval: int = 5
    pretrain_lr: float = 5e-5
    train_lr: float = 1e-5
    batch_size: int = 64
    augment_sigma: float = 0.1
    augment_drop: float = 0.1
    head_dim: int | None = None
    n_clusters: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be at least 1")
        if self.q_size < 2:
            raise ValueError("q_size must be at least 2")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Snapshot and loop
# ---------------------------------------------------------------------------


@dataclass
class Snapshot:
    """Everything derived from one embedding refresh."""

    embeddings: np.ndarray
    digest: str
    model: ClusterModel
    index: NeighborIndex
    scores: SamplingScores
    selection: SelectionSet
    exchanges: dict[int, OracleExchange]
    wrong_precision: float | None
    cache_hits: int
    cache_misses: int


def snapshot_digest(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z).tobytes()).hexdigest()


def wrong_cluster_fraction(pseudo, truths, known, subset=None) -> float:
    """Fraction of samples whose cluster does not match their aligned category."""
    report = evaluate(pseudo, truths, known)
    pseudo = np.asarray(pseudo)
    truths = np.asarray(truths)
    wrong = np.array(
        [report.mapping.get(int(p)) != int(t) for p, t in zip(pseudo, truths)]
    )
    if subset is not None:
        wrong = wrong[np.asarray(subset)]
    return float(wrong.mean()) if wrong.size else 0.0


def _chunks(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        yield order[start : start + size]


def _refresh(
    head: ProjectionHead,
    x: np.ndarray,
    ids: np.ndarray,
    texts: dict[int, str],
    truths: np.ndarray | None,
    known: set[int],
    eligible_rows: np.ndarray,
    cfg: TrainConfig,
    k_clusters: int,
    oracle,
    cache: CacheStore,
    kmeans_seed: int,
) -> Snapshot:
    z = head.forward(x)
    digest = snapshot_digest(z)
    model = kmeans(z, k_clusters, seed=kmeans_seed, ids=ids)
    k_nn = min(cfg.k_neighbors, x.shape[0] - 1)
    index = build_knn(z, k_nn)
    scores = compute_scores(z, model.centers, index, model.pseudo_labels, cfg.alpha)
    selection_rows = select(scores.inconsistency, scores.entropy, cfg.budget, eligible_rows)

    hits0, misses0 = cache.hits, cache.misses
    exchanges: dict[int, OracleExchange] = {}
    if oracle is None:
        # no-oracle ablation: every sample behaves as unselected
        selection = SelectionSet(ids=frozenset(), m=cfg.budget)
    else:
        selection = SelectionSet(
            ids=frozenset(int(ids[r]) for r in selection_rows.ids), m=cfg.budget
        )
        for row in sorted(selection_rows.ids):
            exch = build_exchange(
                row, index, model.pseudo_labels, cfg.q_size, z, model.centers, texts, ids=ids
            )
            ask(oracle, exch, cache)
            exchanges[int(ids[row])] = exch

    precision = None
    if truths is not None:
        sel_rows = np.array(sorted(selection_rows.ids), dtype=np.int64)
        if sel_rows.size:
            precision = wrong_cluster_fraction(
                model.pseudo_labels, truths, known, subset=sel_rows
            )
    return Snapshot(
        embeddings=z,
        digest=digest,
        model=model,
        index=index,
        scores=scores,
        selection=selection,
        exchanges=exchanges,
        wrong_precision=precision,
        cache_hits=cache.hits - hits0,
        cache_misses=cache.misses - misses0,
    )


def run_loop(
    bundle: DatasetBundle,
    cfg: TrainConfig,
    oracle,
    cache: CacheStore | None = None,
):
    """Pretrain on labels, then alternate snapshot refreshes with training.

    Returns ``(head, report)`` where the report carries one record per
    epoch plus oracle accounting. Raises :class:`NumericError` on any
    non-finite loss.
    """
    cache = cache if cache is not None else CacheStore()
    pool = bundle.discovery_pool
    if len(pool) < 2:
        raise ValueError("discovery pool needs at least 2 samples")
    x = np.stack([s.vector for s in pool])
    ids = np.array([s.id for s in pool], dtype=np.int64)
    n = len(pool)

    classes = sorted(bundle.known_categories)
    class_idx = {c: i for i, c in enumerate(classes)}
    labeled_rows = np.array([i for i, s in enumerate(pool) if s.split == "labeled"], dtype=np.int64)
    y_labeled = np.array([class_idx[pool[i].true_label] for i in labeled_rows], dtype=np.int64)
    eligible_rows = np.array(
        [i for i, s in enumerate(pool) if s.split == "unlabeled"], dtype=np.int64
    )
    texts = {s.id: effective_text(s) for s in pool}
    truths = None
    if all(s.true_label is not None for s in pool):
        truths = np.array([s.true_label for s in pool], dtype=np.int64)
    id_to_row = np.full(int(ids.max()) + 1, -1, dtype=np.int64)
    id_to_row[ids] = np.arange(n)

    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_pre, rng_order, rng_augment, rng_assign, rng_kmeans = (
        np.random.default_rng(s) for s in ss.spawn(6)
    )

    d_out = cfg.head_dim or bundle.d
    head = ProjectionHead.init(
        bundle.d, d_out, len(classes), rng_init, input_stats=(x.mean(axis=0), x.std(axis=0))
    )

    # supervised warm-up on the labeled split
    pretrain_loss = None
    if labeled_rows.size and cfg.pretrain_epochs > 0:
        adam = Adam(cfg.pretrain_lr)
        for _ in range(cfg.pretrain_epochs):
            order = rng_pre.permutation(labeled_rows.size)
            epoch_losses = []
            for batch in _chunks(order, cfg.batch_size):
                rows = labeled_rows[batch]
                loss, grads = ce_loss(head, x[rows], y_labeled[batch])
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite pretrain loss {loss}")
                # warm-up fits the classifier on the frozen near-identity
                # representation; reshaping the representation itself is
                # left to the discovery phase, where the contrastive term
                # counteracts supervised collapse onto known categories
                adam.step(head, {k: grads[k] for k in ("wc", "bc")})
                epoch_losses.append(loss)
            pretrain_loss = float(np.mean(epoch_losses))

    k_clusters = cfg.n_clusters or (len(bundle.known_categories) + len(bundle.novel_categories))
    k_clusters = max(1, min(k_clusters, n))

    adam = Adam(cfg.train_lr)
    epoch_records: list[dict] = []
    snapshot: Snapshot | None = None

    for epoch in range(cfg.train_epochs):
        refreshed = epoch % cfg.refresh_interval == 0
        if refreshed:
            snapshot = _refresh(
                head,
                x,
                ids,
                texts,
                truths,
                bundle.known_categories,
                eligible_rows,
                cfg,
                k_clusters,
                oracle,
                cache,
                kmeans_seed=int(rng_kmeans.integers(2**31)),
            )
        assignment = assign_neighbors(
            snapshot.selection, snapshot.exchanges, snapshot.index, rng_assign, ids=ids
        )
        positive_rows = id_to_row[assignment.positive_ids]

        order = rng_order.permutation(n)
        sum_contrastive = 0.0
        sum_ce = 0.0
        n_batches = 0
        for batch in _chunks(order, cfg.batch_size):
            if batch.size < 2:
                continue
            pos = positive_rows[batch]
            extra = np.setdiff1d(np.unique(pos), batch)
            rows = np.concatenate([batch, extra])
            row_pos = {int(r): i for i, r in enumerate(rows)}
            local_pos = np.array([row_pos[int(p)] for p in pos], dtype=np.int64)

            anchor_noise, anchor_mask = _draw_augment(
                rng_augment, (rows.size, d_out), cfg.augment_sigma, cfg.augment_drop
            )
            key_noise, key_mask = _draw_augment(
                rng_augment, (rows.size, d_out), cfg.augment_sigma, cfg.augment_drop
            )
            loss_c, grads = contrastive_objective(
                head,
                x[rows],
                local_pos,
                batch.size,
                cfg.tau,
                anchor_noise,
                anchor_mask,
                key_noise,
                key_mask,
            )
            loss_s = 0.0
            lab_mask = np.isin(batch, labeled_rows)
            if lab_mask.any():
                lab = batch[lab_mask]
                y = np.array([class_idx[pool[r].true_label] for r in lab], dtype=np.int64)
                loss_s, grads_ce = ce_loss(head, x[lab], y)
                grads = add_grads(grads, grads_ce)
            total = loss_c + loss_s
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} "
                    f"(contrastive={loss_c}, cross-entropy={loss_s})"
                )
            adam.step(head, grads)
            sum_contrastive += loss_c
            sum_ce += loss_s
            n_batches += 1

        head.check_finite()
        epoch_records.append(
            {
                "epoch": epoch,
                "refresh": refreshed,
                "snapshot_hash": snapshot.digest,
                "loss_contrastive": sum_contrastive / max(n_batches, 1),
                "loss_ce": sum_ce / max(n_batches, 1),
                "selected": len(snapshot.selection.ids),
                "llm_refined": assignment.refined_count,
                "cache_hits": cache.hits,
                "cache_misses": cache.misses,
                "wrong_cluster_precision": snapshot.wrong_precision,
            }
        )

    report = {
        "config": cfg.as_dict(),
        "dataset": {
            "n_samples": len(bundle.samples),
            "n_pool": n,
            "n_labeled": int(labeled_rows.size),
            "n_unlabeled": int(eligible_rows.size),
            "n_test": len(bundle.test),
            "d": bundle.d,
            "n_known": len(bundle.known_categories),
            "n_novel": len(bundle.novel_categories),
        },
        "pretrain": {"epochs": cfg.pretrain_epochs, "final_loss": pretrain_loss},
        "epochs": epoch_records,
        "oracle": {
            "live_dispatches": cache.live_dispatches,
            "distinct_keys": len(cache),
            "cache_hits": cache.hits,
            "cache_misses": cache.misses,
            "token_cost": cache.token_count,
        },
    }
    return head, report
