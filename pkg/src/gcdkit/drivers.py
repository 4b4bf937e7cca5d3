"""Experiment drivers shared by the command line and the test suite."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import replace

import numpy as np

from .clustering import kmeans, estimate_k
from .config import (
    ConfigError,
    RunConfig,
    build_dataset,
    build_oracle,
)
from .data import DatasetBundle, gen_synthetic, make_gcd_split, save_jsonl
from .evaluation import EvalReport, evaluate
from .interpretation import InterpretationResult, decouple_novel, name_clusters
from .oracle import CacheStore, effective_text
from .sampling import STRATEGIES, build_knn, compute_scores, select_strategy
from .training import run_loop, wrong_cluster_fraction


def discovery_cluster_count(cfg: RunConfig, bundle: DatasetBundle) -> int:
    return cfg.train.n_clusters or (
        len(bundle.known_categories) + len(bundle.novel_categories)
    )


def evaluate_test_split(head, bundle: DatasetBundle, k_eval: int, seed: int) -> EvalReport | None:
    """Cluster the held-out test embeddings and align them to the truth."""
    test = sorted(bundle.test, key=lambda s: s.id)
    if not test or any(s.true_label is None for s in test):
        return None
    x = np.stack([s.vector for s in test])
    ids = np.array([s.id for s in test], dtype=np.int64)
    k_eval = min(k_eval, len(test))
    z = head.forward(x)
    model = kmeans(z, k_eval, seed=seed, ids=ids)
    truth = np.array([s.true_label for s in test], dtype=np.int64)
    return evaluate(model.pseudo_labels, truth, bundle.known_categories)


def interpret_discovery(
    head, bundle: DatasetBundle, cfg: RunConfig, oracle, cache: CacheStore
) -> InterpretationResult:
    """Cluster the discovery pool, decouple novel clusters and name them."""
    if oracle is None:
        raise ConfigError("interpretation needs an oracle mode other than 'none'")
    pool = bundle.discovery_pool
    x = np.stack([s.vector for s in pool])
    ids = np.array([s.id for s in pool], dtype=np.int64)
    z = head.forward(x)
    k = discovery_cluster_count(cfg, bundle)
    model = kmeans(z, min(k, len(pool)), seed=cfg.train.seed, ids=ids)
    labeled_rows = np.array(
        [i for i, s in enumerate(pool) if s.split == "labeled"], dtype=np.int64
    )
    labels = np.array([pool[i].true_label for i in labeled_rows], dtype=np.int64)
    novel = decouple_novel(model, labels, z[labeled_rows])
    if cfg.oracle.mode == "live":
        texts = {s.id: s.text for s in pool}
    else:
        texts = {s.id: effective_text(s) for s in pool}
    return name_clusters(model, novel, z, texts, oracle, cache, ids=ids)


def projection_2d(z: np.ndarray) -> np.ndarray:
    """Deterministic 2-component PCA projection for external plotting."""
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def execute_run(cfg: RunConfig, cache: CacheStore | None = None):
    """Run the full pipeline for one config; returns ``(head, report)``.

    The report is deterministic for a fixed config and mock oracle; the
    caller adds the timestamp when writing it out.
    """
    bundle = build_dataset(cfg)
    oracle = build_oracle(cfg, bundle)
    if cache is None:
        cache = CacheStore.load(cfg.cache_path) if cfg.cache_path else CacheStore()
    head, report = run_loop(bundle, cfg.train, oracle, cache)
    report["run_config"] = cfg.as_dict()

    k = discovery_cluster_count(cfg, bundle)
    k_eval = cfg.eval_k or k
    result = evaluate_test_split(head, bundle, k_eval, seed=cfg.train.seed)
    report["evaluation"] = None if result is None else dict(result.as_dict(), k_used=k_eval)

    if cfg.interpret:
        interp = interpret_discovery(head, bundle, cfg, oracle, cache)
        report["interpretation"] = interp.as_dict()

    if cfg.projection_path:
        pool = bundle.discovery_pool
        z = head.forward(np.stack([s.vector for s in pool]))
        xy = projection_2d(z)
        os.makedirs(os.path.dirname(os.path.abspath(cfg.projection_path)), exist_ok=True)
        with open(cfg.projection_path, "w", encoding="utf-8") as fh:
            fh.write("id,x,y\n")
            for s, row in zip(pool, xy):
                fh.write(f"{s.id},{row[0]!r},{row[1]!r}\n")

    # refresh oracle accounting after evaluation and interpretation
    report["oracle"] = {
        "live_dispatches": cache.live_dispatches,
        "distinct_keys": len(cache),
        "cache_hits": cache.hits,
        "cache_misses": cache.misses,
        "token_cost": cache.token_count,
    }
    if cfg.cache_path:
        cache.save(cfg.cache_path)
    return head, report


def write_report(report: dict, path: str) -> str:
    """Write a report; directories get sequentially numbered run files."""
    if path.endswith(".json"):
        target = path
        parent = os.path.dirname(os.path.abspath(target))
        os.makedirs(parent, exist_ok=True)
    else:
        os.makedirs(path, exist_ok=True)
        existing = [f for f in os.listdir(path) if f.startswith("run-") and f.endswith(".json")]
        target = os.path.join(path, f"run-{len(existing):04d}.json")
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return target


def metrics_line(report: dict) -> str:
    """One flat key=value line for scripting."""
    ev = report.get("evaluation") or {}
    parts = [
        ("h_score", ev.get("h_score")),
        ("acc_known", ev.get("acc_known")),
        ("acc_novel", ev.get("acc_novel")),
        ("acc_overall", ev.get("acc_overall")),
        ("selected_last", report["epochs"][-1]["selected"] if report["epochs"] else None),
        ("dispatches", report["oracle"]["live_dispatches"]),
        ("cache_hits", report["oracle"]["cache_hits"]),
        ("tokens", round(report["oracle"]["token_cost"], 2)),
    ]
    def fmt(v):
        if v is None:
            return "NA"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)
    return "METRICS " + " ".join(f"{k}={fmt(v)}" for k, v in parts)


def bench_samplers(
    cfg: RunConfig,
    budget: int = 200,
    strategies: tuple[str, ...] = STRATEGIES,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
) -> dict:
    """Wrong-cluster precision of each selection strategy at a fixed snapshot.

    The snapshot is the pipeline's first refresh point: the head after
    supervised pretraining, clustered and indexed in its output space.
    Margin and confidence read the classifier softmax; the others read the
    cluster-assignment scores. Requires true labels on every pool sample.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ConfigError(f"unknown strategies: {sorted(unknown)}")
    rows: list[dict] = []
    base_rates: list[float] = []
    for seed in seeds:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.seed = seed
        run_cfg.train = replace(run_cfg.train, seed=seed, train_epochs=0)
        bundle = build_dataset(run_cfg)
        oracle = build_oracle(run_cfg, bundle)
        head, _ = run_loop(bundle, run_cfg.train, oracle, CacheStore())

        pool = bundle.discovery_pool
        if any(s.true_label is None for s in pool):
            raise ConfigError("sampler benchmarking needs true labels on every sample")
        x = np.stack([s.vector for s in pool])
        ids = np.array([s.id for s in pool], dtype=np.int64)
        truths = np.array([s.true_label for s in pool], dtype=np.int64)
        z = head.forward(x)
        k = discovery_cluster_count(run_cfg, bundle)
        model = kmeans(z, min(k, len(pool)), seed=seed, ids=ids)
        index = build_knn(z, min(run_cfg.train.k_neighbors, len(pool) - 1))
        scores = compute_scores(z, model.centers, index, model.pseudo_labels, run_cfg.train.alpha)
        logits = head.logits(z)
        peak = logits.max(axis=1, keepdims=True)
        clf_probs = np.exp(logits - peak)
        clf_probs /= clf_probs.sum(axis=1, keepdims=True)
        eligible = np.array([i for i, s in enumerate(pool) if s.split == "unlabeled"])
        base = wrong_cluster_fraction(model.pseudo_labels, truths, bundle.known_categories,
                                      subset=eligible)
        base_rates.append(base)

        for strategy in strategies:
            rng = np.random.default_rng(seed + 7919)
            sel = select_strategy(
                strategy, scores, budget, eligible, rng=rng, classifier_probs=clf_probs
            )
            chosen = np.array(sorted(sel.ids), dtype=np.int64)
            precision = wrong_cluster_fraction(
                model.pseudo_labels, truths, bundle.known_categories, subset=chosen
            )
            rows.append(
                {
                    "seed": seed,
                    "strategy": strategy,
                    "precision": precision,
                    "selected": int(chosen.size),
                }
            )
    means = {
        s: float(np.mean([r["precision"] for r in rows if r["strategy"] == s]))
        for s in strategies
    }
    return {"rows": rows, "means": means, "base_rates": base_rates}


def estimate_categories(
    cfg: RunConfig, k_max: int, drop_factor: float = 0.5, space: str = "input"
) -> dict:
    """Category-count estimate plus the cluster-size histogram.

    ``space`` picks the representation: the raw input vectors, or the head
    output after a full training run (the pipeline's own feature space).
    """
    bundle = build_dataset(cfg)
    pool = bundle.discovery_pool
    x = np.stack([s.vector for s in pool])
    ids = np.array([s.id for s in pool], dtype=np.int64)
    if space == "trained":
        oracle = build_oracle(cfg, bundle)
        head, _ = run_loop(bundle, cfg.train, oracle, CacheStore())
        vectors = head.forward(x)
    elif space == "input":
        vectors = x
    else:
        raise ConfigError("space must be 'input' or 'trained'")
    model = kmeans(vectors, min(k_max, len(pool)), seed=cfg.train.seed, ids=ids)
    sizes = model.cluster_sizes()
    threshold = drop_factor * (len(pool) / k_max)
    estimate = int((sizes >= threshold).sum())
    return {
        "estimate": estimate,
        "k_max": k_max,
        "drop_factor": drop_factor,
        "threshold": threshold,
        "sizes": sorted(sizes.tolist(), reverse=True),
        "space": space,
    }


def generate_dataset_file(
    out_path: str,
    num_categories: int,
    per_category: int,
    d: int,
    separation: float,
    noise_sigma: float,
    novel_ratio: float,
    labeled_ratio: float,
    seed: int,
    test_fraction: float = 0.2,
) -> DatasetBundle:
    samples = gen_synthetic(
        num_categories, per_category, d, separation, noise_sigma, seed, test_fraction
    )
    bundle = make_gcd_split(samples, novel_ratio, labeled_ratio, seed)
    save_jsonl(bundle, out_path)
    return bundle
