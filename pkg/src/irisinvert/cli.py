"""Command line entry point: ``irisinvert <stage> [--preset desk] [--pipeline gabor] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PIPELINES, PRESETS, load_config
from .experiment import STAGES, Experiment, StageError
from .nn import ConfigurationError


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file merged over the preset")
    common.add_argument("--preset", choices=PRESETS, default="desk")
    common.add_argument("--pipeline", choices=PIPELINES)
    common.add_argument("--out-dir", help="artifact root (default: config out_dir)")
    common.add_argument("--seed", type=int, help="seed for every stage schedule")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="irisinvert", description="Iris template pipelines and template inversion.")
    sub = p.add_subparsers(dest="stage", required=True)
    for s in STAGES:
        sub.add_parser(s, parents=[common], help=f"run the {s} stage")
    sub.add_parser("run-all", parents=[common], help="run every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {"pipeline": args.pipeline} if args.pipeline else {}
    try:
        cfg = load_config(args.config, args.preset, overrides)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed).validate()
    except (ConfigurationError, OSError, ValueError) as e:
        print(f"irisinvert: configuration error: {e}", file=sys.stderr)
        return 2
    if args.stage == "show-config":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    exp = Experiment(cfg, args.out_dir)
    try:
        if args.stage == "run-all":
            exp.run_all()
        else:
            extra = exp.run(args.stage)
            print(f"{args.stage}: ok -> {exp.dir(args.stage)}")
            if args.stage == "evaluate":
                for name, row in extra["rows"].items():
                    print(f"{name}: rank1={row['rank1']:.4f} type1_tar={row['type1_tar']:.4f} "
                          f"type2_tar@{row['far_target']:g}far={row['type2_tar_at_1far']:.4f} eer={row['eer']:.4f}")
    except StageError as e:
        print(f"irisinvert: stage {e.stage} failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
