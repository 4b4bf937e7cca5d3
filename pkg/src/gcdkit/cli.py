"""Command-line surface.

Commands: ``run``, ``bench-samplers``, ``estimate-k``, ``interpret``,
``gen-data``. Configuration comes from a JSON file (``--config``) with
flag overrides on top; flags win over the file, the file wins over the
built-in defaults.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 oracle
error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys

from .config import ConfigError, RunConfig, build_run_config
from .data import DatasetError
from .drivers import (
    bench_samplers,
    estimate_categories,
    execute_run,
    generate_dataset_file,
    metrics_line,
    write_report,
)
from .oracle import OracleError
from .training import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ORACLE = 4
EXIT_NUMERIC = 5


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--dataset", help="JSONL dataset path (overrides synthetic generation)")
    p.add_argument("--seed", type=int, help="run seed (dataset and training)")
    p.add_argument("--oracle", choices=("mock", "noisy-mock", "live", "none"), help="oracle mode")
    p.add_argument("--oracle-url", help="chat-completion endpoint for live mode")
    p.add_argument("--oracle-model", help="model name for live mode")
    p.add_argument("--cache", help="oracle answer cache file")
    p.add_argument("--report", help="report file (.json) or directory")
    p.add_argument("--projection", help="write a 2-D projection CSV of the pool embeddings")
    p.add_argument("--interpret", action="store_true", help="name novel clusters after training")
    p.add_argument("--eval-k", type=int, help="cluster count used at inference")
    # frequently-swept training knobs
    p.add_argument("--tau", type=float)
    p.add_argument("--q-size", type=int)
    p.add_argument("--budget", type=int, help="query budget m per refresh")
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--train-epochs", type=int)
    p.add_argument("--refresh-interval", type=int)
    p.add_argument("--pretrain-lr", type=float)
    p.add_argument("--train-lr", type=float)
    p.add_argument("--batch-size", type=int)
    # synthetic dataset knobs
    p.add_argument("--num-categories", type=int)
    p.add_argument("--per-category", type=int)
    p.add_argument("--dim", type=int, help="synthetic vector dimension")
    p.add_argument("--separation", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--novel-ratio", type=float)
    p.add_argument("--labeled-ratio", type=float)


def _overrides_from(args: argparse.Namespace) -> dict:
    train_keys = {
        "tau": "tau",
        "q_size": "q_size",
        "budget": "budget",
        "k_neighbors": "k_neighbors",
        "pretrain_epochs": "pretrain_epochs",
        "train_epochs": "train_epochs",
        "refresh_interval": "refresh_interval",
        "pretrain_lr": "pretrain_lr",
        "train_lr": "train_lr",
        "batch_size": "batch_size",
    }
    synth_keys = {
        "num_categories": "num_categories",
        "per_category": "per_category",
        "dim": "d",
        "separation": "separation",
        "noise_sigma": "noise_sigma",
        "novel_ratio": "novel_ratio",
        "labeled_ratio": "labeled_ratio",
    }
    overrides: dict = {"train": {}, "synthetic": {}, "oracle": {}}
    for attr, key in train_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides["train"][key] = value
    for attr, key in synth_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides["synthetic"][key] = value
    if getattr(args, "dataset", None):
        overrides["dataset_path"] = args.dataset
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["train"]["seed"] = args.seed
    if getattr(args, "oracle", None):
        overrides["oracle"]["mode"] = args.oracle
    if getattr(args, "oracle_url", None):
        overrides["oracle"]["url"] = args.oracle_url
    if getattr(args, "oracle_model", None):
        overrides["oracle"]["model"] = args.oracle_model
    if getattr(args, "cache", None):
        overrides["cache_path"] = args.cache
    if getattr(args, "report", None):
        overrides["report_path"] = args.report
    if getattr(args, "projection", None):
        overrides["projection_path"] = args.projection
    if getattr(args, "interpret", False):
        overrides["interpret"] = True
    if getattr(args, "eval_k", None) is not None:
        overrides["eval_k"] = args.eval_k
    overrides = {k: v for k, v in overrides.items() if v != {}}
    return overrides


def _config_from(args: argparse.Namespace) -> RunConfig:
    return build_run_config(getattr(args, "config", None), _overrides_from(args))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    head, report = execute_run(cfg)
    report["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    if cfg.report_path:
        target = write_report(report, cfg.report_path)
        print(f"report written to {target}")
    print(metrics_line(report))
    return EXIT_OK


def cmd_bench_samplers(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    strategies = tuple(args.strategies.split(",")) if args.strategies else None
    kwargs = {"strategies": strategies} if strategies else {}
    result = bench_samplers(cfg, budget=args.bench_budget, seeds=seeds, **kwargs)
    print(f"{'strategy':<12} {'seed':>4} {'selected':>8} {'wrong-cluster %':>16}")
    for row in result["rows"]:
        print(
            f"{row['strategy']:<12} {row['seed']:>4} {row['selected']:>8} "
            f"{100 * row['precision']:>15.2f}"
        )
    print("means:")
    for strategy, mean in result["means"].items():
        print(f"  {strategy:<12} {100 * mean:.2f}")
    print(f"base wrong-cluster rate: {100 * float(sum(result['base_rates']) / len(result['base_rates'])):.2f}")
    if args.report:
        target = write_report({"bench_samplers": result}, args.report)
        print(f"report written to {target}")
    return EXIT_OK


def cmd_estimate_k(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    result = estimate_categories(cfg, args.k_max, args.drop_factor, space=args.space)
    print(f"estimated categories: {result['estimate']} (k_max={args.k_max}, "
          f"threshold={result['threshold']:.1f}, space={args.space})")
    print("cluster sizes: " + " ".join(str(s) for s in result["sizes"]))
    return EXIT_OK


def cmd_interpret(args: argparse.Namespace) -> int:
    args.interpret = True
    cfg = _config_from(args)
    head, report = execute_run(cfg)
    report["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    for entry in report["interpretation"]["entries"]:
        name = entry["name"] if entry["name"] is not None else "(no name)"
        print(f"cluster {entry['cluster']}: {name}  representatives={entry['representative_ids']}")
    if cfg.report_path:
        target = write_report(report, cfg.report_path)
        print(f"report written to {target}")
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    bundle = generate_dataset_file(
        out_path=args.out,
        num_categories=args.num_categories or 20,
        per_category=args.per_category or 200,
        d=args.dim or 32,
        separation=args.separation or 10.0,
        noise_sigma=args.noise_sigma if args.noise_sigma is not None else 3.8,
        novel_ratio=args.novel_ratio or 0.25,
        labeled_ratio=args.labeled_ratio or 0.1,
        seed=args.seed or 0,
    )
    print(
        f"wrote {len(bundle.samples)} samples to {args.out} "
        f"({len(bundle.labeled)} labeled, {len(bundle.unlabeled)} unlabeled, "
        f"{len(bundle.test)} test; {len(bundle.known_categories)} known / "
        f"{len(bundle.novel_categories)} novel categories)"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcdkit",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train the discovery loop and evaluate")
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench-samplers", help="compare selection strategies")
    _add_config_flags(p_bench)
    p_bench.add_argument("--bench-budget", type=int, default=200)
    p_bench.add_argument("--seeds", default="0,1,2,3,4")
    p_bench.add_argument("--strategies", help="comma-separated subset of strategies")
    p_bench.set_defaults(func=cmd_bench_samplers)

    p_est = sub.add_parser("estimate-k", help="estimate the category count")
    _add_config_flags(p_est)
    p_est.add_argument("--k-max", type=int, default=30)
    p_est.add_argument("--drop-factor", type=float, default=0.5)
    p_est.add_argument("--space", choices=("input", "trained"), default="input")
    p_est.set_defaults(func=cmd_estimate_k)

    p_int = sub.add_parser("interpret", help="train, then name novel clusters")
    _add_config_flags(p_int)
    p_int.set_defaults(func=cmd_interpret)

    p_gen = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    _add_config_flags(p_gen)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
