"""Command-line entry points: gen, train, suite, check."""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from .checks import run_checks
from .data import dataset_hash, partition_clients, save_snapshot
from .exceptions import ConfigError, ParseError, ValidationError
from .federated import write_metrics_csv
from .harness import (build_scenario_dataset, emit_per_run_csv, emit_results_csv,
                      emit_results_markdown, load_experiment_config, run_single,
                      run_suite)

_VALIDATION_ERRORS = (ConfigError, ParseError, ValidationError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fedmm", description="Federated multi-modal regression simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic dataset snapshot (JSON lines)")
    gen.add_argument("--config", required=True, help="experiment config (TOML)")
    gen.add_argument("--seed", type=int, default=None, help="override the base seed")
    gen.add_argument("--out", default="out", help="output directory")

    train = sub.add_parser("train", help="single training run with a full metrics trace")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default="out")
    train.add_argument("--method", default="fdrmfl", help="fdrmfl, pca, tsvd or rp")
    train.add_argument("--save-rounds", action="store_true",
                       help="write a model checkpoint after every round")

    suite = sub.add_parser("suite", help="seeded repeated method comparison")
    suite.add_argument("--config", required=True)
    suite.add_argument("--seed", type=int, default=None, help="override the base seed")
    suite.add_argument("--repeats", type=int, default=None)
    suite.add_argument("--out", default="out")
    suite.add_argument("--methods", default=None, help="comma-separated method subset")

    sub.add_parser("check", help="run the built-in verification battery")
    return parser


def _cmd_gen(args) -> int:
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scenario in cfg.scenarios():
        dataset = build_scenario_dataset(cfg, scenario, cfg.base_seed)
        path = out / f"dataset_{scenario}_seed{cfg.base_seed}.jsonl"
        save_snapshot(dataset, path)
        print(f"wrote {path} ({len(dataset.train)} train / {len(dataset.test)} test)")
    return 0


def _cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.method not in cfg.methods:
        cfg = replace(cfg, methods=(args.method,))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = cfg.scenarios()[0]
    seed = cfg.base_seed
    dataset = build_scenario_dataset(cfg, scenario, seed)
    clients = partition_clients(dataset, cfg.clients, cfg.partition, seed)
    print(f"scenario={scenario} seed={seed} data_hash={dataset_hash(clients)[:16]}")

    if args.method == "fdrmfl":
        from .federated import FederatedMultiModalRegressor, evaluate_mse
        w = cfg.loss_weights
        reg = FederatedMultiModalRegressor(
            rounds=cfg.rounds, local_epochs=cfg.local_epochs, batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate, latent_dim=cfg.latent_dim, fusion=cfg.fusion,
            bidirectional=cfg.bidirectional, mi_weight=w.mi_weight,
            align_weight=w.align_weight, contrast_weight=w.contrast_weight,
            temperature=w.temperature, align_sigma=w.align_sigma,
            history_size=w.history_size, seed=seed)
        save_dir = None
        if args.save_rounds:
            save_dir = out / "checkpoints"
            save_dir.mkdir(exist_ok=True)
        reg.fit(clients, step_log_path=out / "training_log.jsonl",
                save_rounds_dir=str(save_dir) if save_dir else None)
        trace, model = reg.trace_, reg.model_
        pooled = evaluate_mse(model, [s for c in clients for s in c.test])
    else:
        result = run_single(cfg, args.method, clients, seed)
        trace, pooled = result["trace"], result["pooled"]
        model = None
    write_metrics_csv(trace, out / "metrics.csv")
    if model is not None:
        model.save(out / "model_final.bin")
    print(f"final pooled test mse: {pooled:.6f}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def _cmd_suite(args) -> int:
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.repeats is not None:
        cfg = replace(cfg, repeats=args.repeats)
    if args.methods is not None:
        cfg = replace(cfg, methods=tuple(m.strip() for m in args.methods.split(",") if m.strip()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, records = run_suite(cfg, progress=print)
    hyper = cfg.hyper_block()
    emit_results_csv(table, out / "results.csv", hyper)
    emit_results_markdown(table, out / "results.md", hyper)
    emit_per_run_csv(records, out / "per_run.csv")
    print(f"wrote {out / 'results.csv'}, {out / 'results.md'}, {out / 'per_run.csv'}")
    return 0


def _cmd_check(_args) -> int:
    return 0 if run_checks() else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"fedmm: error: {err}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "suite":
            return _cmd_suite(args)
        if args.command == "check":
            return _cmd_check(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except _VALIDATION_ERRORS as err:
        print(f"fedmm: error: {err}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
