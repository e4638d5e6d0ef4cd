"""Command-line driver: ``python3 -m stablewalk <command> --config cfg.yaml --seed 0 --out runs/x``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from stablewalk.errors import StablewalkError
from stablewalk.harness import experiments
from stablewalk.harness.config import VARIANTS, ExperimentConfig, dump_config, load_config
from stablewalk.harness.checkpoint import load_checkpoint

LOG_ENV = "STABLEWALK_LOG"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablewalk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train one policy and write metrics.csv plus checkpoints under ckpt/",
        "eval": "evaluate a checkpoint; writes eval.csv and summary.csv",
        "ablate": "train and evaluate every ablation variant over the config seeds",
        "push": "push-recovery survival table for one or more checkpoints",
        "sweep": "success rate by commanded forward speed",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="seed (u64); defaults to the first config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--variant", choices=VARIANTS, default=None, help="override the config variant")
        if name in ("eval", "push", "sweep"):
            p.add_argument("--checkpoint", type=Path, action="append", required=True,
                           help="checkpoint file; repeat to compare several")
        if name == "push":
            p.add_argument("--regime", choices=("none", "moderate", "extreme"), default=None)
        if name == "eval":
            p.add_argument("--debug", action="store_true", help="also dump the first episode's trajectory")
    return parser


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.variant is not None:
        config = config.with_variant(args.variant)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise StablewalkError("--seed must be an unsigned 64-bit integer")
        config = replace(config, seeds=(args.seed,))
    return config


def _policies(paths) -> dict:
    out = {}
    for path in paths:
        _, _, extra = load_checkpoint(path)
        out[(extra.get("variant", "full"), int(extra.get("seed", 0)))] = path
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "INFO").upper(), format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    args = _parser().parse_args(argv)
    try:
        config = _config(args)
        seed = config.seeds[0]
        args.out.mkdir(parents=True, exist_ok=True)
        dump_config(config, args.out / "config.yaml")
        if args.command == "train":
            result = experiments.run_training(config, seed, args.out)
            print(result.checkpoint)
        elif args.command == "eval":
            for ckpt in args.checkpoint:
                out = args.out if len(args.checkpoint) == 1 else args.out / ckpt.stem
                for row in experiments.run_evaluation(ckpt, config, seed, out, debug=args.debug):
                    print(f"{row['terrain']}: success {row['success_mean']:.3f} "
                          f"vel_err {row['vel_tracking_error_mean']:.3f}")
        elif args.command == "ablate":
            result = experiments.run_ablation(config, args.out)
            for row in result.table:
                print(f"{row['variant']:>20} {row['terrain']:>10} success {row['success_mean']:.3f} "
                      f"+- {row['success_std']:.3f}")
        elif args.command == "push":
            regime = args.regime or config.push.regime
            rows = experiments.push_recovery_experiment(_policies(args.checkpoint), regime, config, args.out)
            for row in rows:
                if row["axis"] == "all" and row["bin"] == "all":
                    print(f"{row['variant']} seed {row['seed']}: survival {row['survival']:.3f}")
        elif args.command == "sweep":
            rows = experiments.speed_sweep(_policies(args.checkpoint), config, out_dir=args.out)
            for row in rows:
                print(f"{row['terrain']} {row['speed']:.2f} {row['variant']}: success {row['success_rate']:.3f}")
    except StablewalkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
