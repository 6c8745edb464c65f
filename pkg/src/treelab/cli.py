"""Command-line entry point.

Commands: train-lm, train-brackets, generate, eval, gradcheck, bench.
Exit codes: 0 success, 1 configuration/validation error, 2 runtime
failure (NaN abort, missing file).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import (RunConfig, get_preset, load_config, parse_config,
                     preset_names)
from .errors import ConfigError, DataError, TrainingAbort
from .models import ModelConfig


def _add_common(parser):
    parser.add_argument("--config", help="path to a run config INI file")
    parser.add_argument("--preset", help=f"one of: {', '.join(preset_names())}")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--run-dir", dest="run_dir", help="run directory")
    parser.add_argument("--deterministic", action="store_true",
                        help="zero wall-time fields and pin single-worker execution")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="treelab",
        description="Tree-reduction sequence models vs. a small Transformer "
                    "on a from-scratch autodiff core.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (("train-lm", "train a character language model"),
                       ("train-brackets", "train a bracket-balance classifier")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        p.add_argument("--corpus", help="corpus path or 'synthetic[:chars]'")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: run dir best)")
    p.add_argument("--corpus", help="corpus path or 'synthetic[:chars]'")
    p.add_argument("--prompt")
    p.add_argument("--length", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--greedy", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")

    p = sub.add_parser("bench", help="forward-time scaling benchmark")
    p.add_argument("--out", default="bench_report.jsonl")
    p.add_argument("--sizes", type=int, nargs="+")

    return parser


def _placeholder_config() -> RunConfig:
    # generate/eval take their real model config from the checkpoint header
    return RunConfig(model=ModelConfig(variant="tree", task="lm-one",
                                       embed_dim=8, vocab_size=65, seq_len=16))


def _resolve_config(args) -> RunConfig:
    has_preset = getattr(args, "preset", None)
    has_config = getattr(args, "config", None)
    if has_preset and has_config:
        raise ConfigError("pass either --preset or --config, not both")
    if has_preset:
        cfg = get_preset(args.preset)
    elif has_config:
        cfg = load_config(args.config)
    elif args.command in ("train-lm", "train-brackets"):
        raise ConfigError("training needs --preset or --config")
    else:
        cfg = _placeholder_config()

    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "run_dir", None):
        cfg.run_dir = args.run_dir
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if getattr(args, "corpus", None):
        cfg.data.corpus = args.corpus
    if getattr(args, "epochs", None):
        cfg.train.epochs = args.epochs
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    for field in ("prompt", "length", "temperature", "top_k", "greedy"):
        value = getattr(args, field, None)
        if value not in (None, False):
            setattr(cfg.sample, field, value)
    if not cfg.run_dir and args.command in ("train-lm", "train-brackets"):
        tag = args.preset or "custom"
        cfg.run_dir = f"runs/{tag}-seed{cfg.seed}"
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    from . import runners

    try:
        if args.command == "gradcheck":
            return runners.run_gradcheck()
        if args.command == "bench":
            runners.run_benchmark(None, args.out, sizes=args.sizes)
            return 0
        cfg = _resolve_config(args)
        if args.command == "train-lm":
            run_dir = runners.run_train_lm(cfg)
            print(f"run directory: {run_dir}")
        elif args.command == "train-brackets":
            run_dir = runners.run_train_brackets(cfg)
            print(f"run directory: {run_dir}")
        elif args.command == "generate":
            runners.run_generate(cfg)
        elif args.command == "eval":
            runners.run_eval(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, DataError, TrainingAbort) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
