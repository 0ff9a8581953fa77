"""Command line entry point.

    uc2d pipeline|contraction|doubling|three-spheres|vanishing-order --config cfg.json --out DIR

Exit status: 0 on success, 2 if a stage failed (recorded in report.json),
1 if the config is invalid.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .lab import ExperimentConfig, InvalidConfig, run, write_outputs

COMMANDS = {
    "pipeline": "pipeline",
    "contraction": "contraction_scaling",
    "doubling": "doubling",
    "three-spheres": "three_spheres",
    "vanishing-order": "vanishing_order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uc2d", description="Reduction pipeline and unique-continuation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (default: config 'output' or '.')")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, COMMANDS[args.command])
        output = run(cfg)
    except InvalidConfig as exc:
        print(f"uc2d: invalid config: {exc}", file=sys.stderr)
        return 1
    out_dir = args.out or cfg.output or "."
    for path in write_outputs(output, out_dir):
        print(path)
    if not output.ok:
        for err in output.report["errors"]:
            print(f"uc2d: stage {err['stage']} failed: {err['message']}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
