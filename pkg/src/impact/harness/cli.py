"""Command-line entry point: ``impact <stage> [--config PATH] [--seed N] [--out DIR] [--resume]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from impact.harness.config import load_config
from impact.harness.pipeline import STAGES, Pipeline, StageError
from impact.harness.report import emit_report

COMMANDS = (*STAGES, "report", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impact", description="Desk-scale interpretability pipeline on a tiny ViT.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--resume", action="store_true", help="skip stages whose outputs verify")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    stage = args.command
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if stage == "report":
            for name, path in emit_report(cfg.out).items():
                print(f"{name}: {path}")
            return 0
        stages = STAGES if stage == "pipeline" else (stage,)
        manifest = Pipeline(cfg, resume=args.resume).run(stages)
        print(f"{stage}: ok ({cfg.out}, complete={manifest['complete']})")
        return 0
    except StageError as e:
        print(f"error in stage {e.stage}: {e.cause}", file=sys.stderr)
        return 1
    except Exception as e:  # config / report problems
        print(f"error in stage {stage}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
