"""Command line: ``shotmeta {run,eval,compare,plot,selfcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import load_config, parse_override
from .engine import evaluate
from .errors import ConfigError
from .experiment import (
    WORKERS_ENV,
    RunFailed,
    build_mask,
    build_model,
    run_experiment,
    stream,
    test_time_inner,
)
from .report import compare_runs, format_table, plot_runs
from .selfcheck import run_selfcheck
from .tasks import make_pool

EXIT_CONFIG = 2
EXIT_RUN_FAILED = 3


def _config_error(exc: ConfigError) -> int:
    print(json.dumps({"errors": exc.errors}, indent=2), file=sys.stderr)
    return EXIT_CONFIG


def cmd_run(args) -> int:
    try:
        overrides = dict(parse_override(s) for s in args.set)
        if args.out is not None:
            overrides["out_dir"] = args.out
        cfg, warnings = load_config(args.config, overrides)
    except ConfigError as exc:
        return _config_error(exc)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    try:
        result = run_experiment(cfg)
    except RunFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    for r in result.seeds:
        print(f"seed {r.seed}: test {100 * r.test_accuracy:.2f} +/- {100 * r.ci95:.2f}")
    print(f"pooled: {100 * result.pooled_mean:.2f} +/- {100 * result.pooled_ci95:.2f}  ({result.out_dir})")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        cfg, _ = load_config(run_dir / "config.yaml")
    except ConfigError as exc:
        return _config_error(exc)
    pool = make_pool(cfg.pool)
    episodes = args.episodes or cfg.eval_episodes
    for seed in cfg.seeds:
        model = build_model(cfg, seed)
        state = load_checkpoint(run_dir / f"seed_{seed}" / "best.npz")
        theta = state.best_val[1] if state.best_val is not None else state.theta0
        rng = np.random.default_rng(args.seed) if args.seed is not None else stream(seed, 3)
        res = evaluate(theta, model, pool, args.split, episodes,
                       test_time_inner(cfg, build_mask(cfg, model)), rng,
                       cfg.n_way, cfg.k_shot, cfg.q_query)
        print(f"seed {seed} {args.split}: {res}")
    return 0


def cmd_compare(args) -> int:
    try:
        runs, deltas = compare_runs(args.run_dirs)
    except ConfigError as exc:
        return _config_error(exc)
    print(format_table(runs, deltas))
    return 0


def cmd_plot(args) -> int:
    try:
        paths = plot_runs(args.run_dirs, args.out, args.phase)
    except ConfigError as exc:
        return _config_error(exc)
    for p in paths:
        print(p)
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shotmeta",
        description="Gradient-based meta-learning with trajectory-distortion suppression.",
        epilog=f"Seeds run in parallel when {WORKERS_ENV} is set above 1.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every seed of a config")
    r.add_argument("-c", "--config", help="YAML config file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable; pool keys as pool.dim=8)")
    r.add_argument("--out", help="run directory (overrides out_dir)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="re-evaluate the best checkpoints of a run")
    e.add_argument("run_dir")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int, help="episode seed (default: the run's own test stream)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="tabulate runs that share an evaluation protocol")
    c.add_argument("run_dirs", nargs="+")
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="SVG line charts of validation accuracy and cosine vs epoch")
    pl.add_argument("run_dirs", nargs="+")
    pl.add_argument("--out", default="plots")
    pl.add_argument("--phase", default="train", choices=("train", "pretrain"))
    pl.set_defaults(func=cmd_plot)

    s = sub.add_parser("selfcheck", help="run the fast oracle suite")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
