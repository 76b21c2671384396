"""Command line entry point: ``phyadv <stage> --config FILE --out DIR [--seed N]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, FormatError, NumericError, ReportError
from .config import load_config
from .experiment import run_experiment, run_stage

COMMANDS = ("generate-data", "train", "attack", "simulate", "report", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phyadv", description="Adversarial attacks on physical-layer ML models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"generate-data": "synthesize and save the IQ dataset",
             "train": "train the models of the case study",
             "attack": "run the attacks and write curves and family results",
             "simulate": "run the feedback-training simulations (case study c)",
             "report": "build report.json and report.txt from the artifacts",
             "run": "run every stage of the case study in order"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the config's base seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "run":
            run_experiment(cfg, args.out)
        else:
            run_stage(cfg, args.command, args.out)
    except (ConfigError, FormatError, ReportError) as exc:
        print(f"phyadv: error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"phyadv: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
