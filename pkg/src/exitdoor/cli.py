"""Command-line entry point: ``exitdoor <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .datasets import DatasetError
from .pipeline import (StageError, run_baseline, run_defend, run_inject, run_report, run_train,
                       run_victim_eval)

log = logging.getLogger("exitdoor")

SUBCOMMANDS = {
    "train": "train the clean control backbone",
    "inject": "inject the multi-exit backdoor into the clean backbone",
    "victim-eval": "attach victim ICs to the backdoored backbone and sweep (N_v, seed)",
    "defend": "run detectors and removers on the clean, backdoored and BadNets models",
    "baseline": "train the BadNets positive control",
    "report": "aggregate results into CSV/JSON tables and plots",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exitdoor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="experiment YAML (default: the shipped configs/default.yaml)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a dotted config key, e.g. attack.inject_epochs=20 (repeatable)")
        p.add_argument("--out-dir", type=Path, default=None, help="run directory (default: output.dir)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep cells")
        p.add_argument("--force", action="store_true",
                       help="overwrite results of another config / aggregate mismatched manifests")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "victim-eval":
            p.add_argument("--checkpoint", type=Path, default=None,
                           help="backdoored backbone to evaluate (default: <out-dir>/inject/model.pt)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        out = args.out_dir or Path(cfg.output.dir)
        if args.command == "train":
            result = run_train(cfg, out, args.force)
        elif args.command == "inject":
            result = run_inject(cfg, out, args.force)
        elif args.command == "baseline":
            result = run_baseline(cfg, out, args.force)
        elif args.command == "victim-eval":
            result = run_victim_eval(cfg, out, args.jobs, args.checkpoint, args.force)
        elif args.command == "defend":
            result = run_defend(cfg, out, args.jobs, args.force)
        else:
            result = run_report(out, force=args.force, plots=cfg.output.plots)
    except (ConfigError, StageError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(_brief(args.command, result), indent=2, sort_keys=True))
    return 0


def _brief(command: str, result):
    """Short console summary; full records live in the run directory."""
    if command == "victim-eval":
        return [{k: r[k] for k in ("n_v", "seed", "threshold", "acc_top1", "asr")} for r in result]
    if command == "defend":
        return [{k: r.get(k) for k in ("target", "method", "statistic", "flagged", "vanilla_asr_after",
                                       "victim_asr_after_mean") if k in r} for r in result]
    if command == "report":
        return {k: result[k] for k in ("stages", "manifest")}
    return result


if __name__ == "__main__":
    sys.exit(main())
