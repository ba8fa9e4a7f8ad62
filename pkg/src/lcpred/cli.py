"""Command-line entry point: one subcommand per pipeline stage plus run-all.

Errors surface as a single JSON line on stderr with a nonzero exit code so
wrapping scripts can parse failures mechanically.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from . import pipeline
from .errors import PipelineError, StageError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcpred",
        description="Frenet-frame lane-change intention pipeline: synthetic "
                    "recordings to the cross-population accuracy report.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, per_population):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON config file; omitted fields use defaults")
        p.add_argument("--seed", type=int, default=None,
                       help="override the global seed")
        p.add_argument("--out", default=None,
                       help="override the output directory")
        if per_population:
            p.add_argument("--population", default=None,
                           help="restrict to one population tag "
                                "(default: all configured populations)")
        return p

    add("synth", "generate the synthetic recordings", True)
    add("ingest", "parse and validate the raw recordings", True)
    add("refpath", "fit the lane-separating SVM and build the reference path", True)
    add("convert", "convert tracks to Frenet coordinates", True)
    add("segment", "detect lane changes and cut labeled windows", True)
    add("features", "build balanced 50x36 sample datasets", True)
    add("train", "train one model per training regime and seed", False)
    add("evaluate", "evaluate every checkpoint on every test split", False)
    add("report", "aggregate evaluations into the accuracy matrix", False)
    add("run-all", "run every stage end to end", False)
    return parser


def _effective_config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return pipeline.load_config(args.config, overrides)


def _log(msg: str) -> None:
    print(msg, flush=True)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        t0 = time.time()
        if args.command == "run-all":
            pipeline.run_all(cfg, log=_log)
        else:
            stage = args.command
            tag = getattr(args, "population", None)
            pipeline.run_stage(cfg, stage, tag=tag, log=_log)
        _log(f"[{args.command}] done in {time.time() - t0:.1f}s "
             f"(config {pipeline.config_hash(cfg)}, seed {cfg['seed']})")
        return 0
    except (PipelineError, OSError, ValueError, KeyError) as exc:
        stage = exc.stage if isinstance(exc, StageError) else args.command
        print(json.dumps({"error": type(exc).__name__, "stage": stage,
                          "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
