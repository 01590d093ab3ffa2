"""Command-line entry point ``robusto``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from . import app
from .config import MODES, PRESETS, ConfigError, parse_config


def build_parser():
    parser = argparse.ArgumentParser(
        prog="robusto",
        description="Topology optimization robust against worst-case material defects.")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--preset", default="cantilever", choices=PRESETS)
    parser.add_argument("--out", help="output directory (overrides io.output_dir)")
    parser.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads; 1 is bitwise reproducible")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides, e.g. grid.nx=60 constraints.D=0.04")
    return parser


def main(argv=None):
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"io.output_dir={args.out}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    try:
        cfg = parse_config(args.config, mode=args.mode, preset=args.preset, overrides=overrides)
    except ConfigError as exc:
        print(f"robusto: {exc}", file=sys.stderr)
        return 2

    with threadpool_limits(limits=cfg.run.threads):
        try:
            result = app.RUNNERS[cfg.mode](cfg)
        except (app.RunError, OSError, ValueError, RuntimeError) as exc:
            print(f"robusto {cfg.mode}: {exc}", file=sys.stderr)
            return 1

    if cfg.mode == "gradcheck":
        app.write_csv_rows(sys.stdout, ("element", "analytic", "numeric", "rel_error"), result)
        return 0
    if cfg.mode == "oracle":
        app.write_csv_rows(sys.stdout, ("instance", "D", "oracle", "solver", "rel_gap",
                                        "allowance", "ok"), result)
        return 0 if all(r[-1] for r in result) else 1
    brief = {k: v for k, v in result.items() if k not in ("config", "baseline")}
    print(json.dumps(app.outputs.jsonable(brief), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
