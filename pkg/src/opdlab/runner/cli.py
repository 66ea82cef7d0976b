"""Command-line entry point: ``opdlab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error (including missing inputs),
3 determinism or statistical check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..env import ConfigError
from . import experiment as ex
from .config import SCHEMA, ExperimentConfig, describe_schema

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3

log = logging.getLogger("opdlab")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file (defaults apply otherwise)")
    g = p.add_argument_group("config overrides (one flag per config key)")
    for key, spec in SCHEMA.items():
        if key == "config_version":
            continue
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar=spec.type.__name__.upper(),
                       help=spec.doc)


def _config(args, run_dir=None) -> ExperimentConfig:
    """--config if given, else the run directory's snapshot, else defaults; flags override."""
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    snap = Path(run_dir) / "config.cfg" if run_dir else None
    if snap is not None and snap.exists():
        return ExperimentConfig.load(snap, overrides)
    return ExperimentConfig(overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opdlab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--describe-config", action="store_true", help="print the config schema and exit")
    sub = ap.add_subparsers(dest="cmd")

    p = sub.add_parser("gen", help="generate train / holdout / pretrain pools")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("train", help="run the configured trainer")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory (must hold pools)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt")
    p.add_argument("--stop-after", type=int, help="halt after this step (or round) as if interrupted")

    p = sub.add_parser("eval", help="greedy-decode evaluation of a checkpoint or the teacher")
    _add_config_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--eval-teacher", action="store_true", help="evaluate the configured teacher")
    p.add_argument("--block", default="student")
    p.add_argument("--holdout", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", help="score the training pool for curriculum selection")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory (must hold pools)")
    p.add_argument("--checkpoint", help="student checkpoint (default: the base student)")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("select", help="apply a selection strategy to a scored CSV")
    _add_config_flags(p)
    p.add_argument("--scored", required=True)
    p.add_argument("--pool", required=True, help="pool JSONL the scored ids refer to")
    p.add_argument("--output", required=True, help="selection file (one id per line)")
    p.add_argument("--k", type=int, help="override k_select")

    p = sub.add_parser("analyze", help="variance, KL-identity and budget analyses")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("variance")
    _add_config_flags(a)
    a.add_argument("--run", required=True, help="run directory holding pools")
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--n-samples", type=int, default=10000)
    a.add_argument("--instance", type=int, default=0, help="holdout index")
    a.add_argument("--sharpness", type=float, default=10.0)
    a.add_argument("--n-boot", type=int, default=1000)
    a = asub.add_parser("kl-check")
    _add_config_flags(a)
    a.add_argument("--out", required=True)
    a.add_argument("--n-samples", type=int, default=200000)
    a.add_argument("--threshold", type=float, default=3.0)
    a.add_argument("--sharpness", type=float, default=5.0)
    a = asub.add_parser("budget")
    a.add_argument("--metrics", nargs="+", required=True)
    a.add_argument("--target", type=float, default=0.6)
    a.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="train several algorithms on one config and report")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--algos", default="opd,grpo")
    p.add_argument("--target", type=float, default=0.6)
    p.add_argument("--threads", type=int, default=1)
    return ap


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def run(args) -> int:
    if args.cmd == "gen":
        _print(ex.cmd_gen(_config(args), args.out))
    elif args.cmd == "train":
        _print(ex.cmd_train(_config(args, args.out), args.out, args.threads, args.resume, args.stop_after))
    elif args.cmd == "eval":
        cfg = _config(args)
        policy = ex.build_teacher(cfg) if args.eval_teacher else ex.load_policy(args.checkpoint, args.block)
        ex.cmd_eval(policy, args.holdout, args.out, cfg.thresholds_tuple(), cfg.max_len, cfg.hash())
        print((Path(args.out) / "eval.txt").read_text(encoding="utf-8"), end="")
    elif args.cmd == "score":
        print(ex.cmd_score(_config(args, args.out), args.out, args.checkpoint, args.threads))
    elif args.cmd == "select":
        ids = ex.cmd_select(_config(args), args.scored, args.pool, args.output, args.k)
        print(f"selected {len(ids)} -> {args.output}")
    elif args.cmd == "analyze":
        if args.analysis == "variance":
            res = ex.cmd_variance(_config(args, args.run), args.run, args.out, args.checkpoint, args.n_samples,
                                  args.instance, args.sharpness, args.n_boot)
            _print(res["dominance"])
        elif args.analysis == "kl-check":
            _print(ex.cmd_kl_check(_config(args), args.out, args.n_samples, args.threshold,
                                   args.sharpness))
        else:
            _print(ex.cmd_budget(args.metrics, args.out, args.target, ex.joint_hash(args.metrics)))
    elif args.cmd == "compare":
        algos = [a.strip() for a in args.algos.split(",") if a.strip()]
        _print(ex.cmd_compare(_config(args), args.out, algos, args.target, args.threads))
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.describe_config:
        print(describe_schema())
        return EXIT_OK
    if not args.cmd:
        ap.print_help()
        return EXIT_CONFIG
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
