"""Command-line front end.

Exit codes: 0 success, 2 usage or I/O error, 3 invalid configuration,
4 finished with unusable grid points, 5 schema mismatch or missing/corrupt
input (click tables, manifest).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import OUT_ENV, ConfigError, load_config
from .pipeline import ManifestError, reconstruct, report, simulate, sweep_gamma
from .tables import SchemaError

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_UNUSABLE = 4
EXIT_SCHEMA = 5

log = logging.getLogger("wignerqdt")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="YAML/JSON run configuration or a run manifest (default: built-in)")
    common.add_argument("--out", metavar="DIR",
                        help=f"output directory (default: config output.dir, then ${OUT_ENV})")
    common.add_argument("--seed", type=_u64, metavar="U64", help="override noise.seed")
    common.add_argument("--workers", type=_positive, default=1, metavar="N",
                        help="worker processes (results do not depend on N)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="wignerqdt",
                                description="Simulate and reconstruct detector POVM Wigner "
                                            "functions from displaced thermal probes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write click-statistics tables")

    r = sub.add_parser("reconstruct", parents=[common],
                       help="invert click tables into Wigner estimates and fits")
    r.add_argument("stats", nargs="?",
                   help="click table or run directory (default: simulate into --out first)")

    s = sub.add_parser("sweep-gamma", parents=[common],
                       help="relative error as a function of the regularization weight")
    s.add_argument("--gammas", type=float, nargs="+", metavar="G",
                   help="regularization weights (default: sweep.gammas from the config)")

    rp = sub.add_parser("report", parents=[common], help="plot-ready tables from a finished run")
    rp.add_argument("run_dir", nargs="?", help="run directory (default: --out)")
    rp.add_argument("--figures", action="store_true",
                    help="also render PNG figures next to the tables (needs matplotlib)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        if args.command == "report":
            run_dir = args.run_dir or cfg.output_dir(args.out)
            text, _ = report(run_dir, figures=args.figures)
            if not args.quiet:
                sys.stdout.write(text)
            return EXIT_OK
        out = cfg.output_dir(args.out)
        if args.command == "simulate":
            res = simulate(cfg, out, args.workers)
        elif args.command == "reconstruct":
            res = reconstruct(cfg, out, args.stats, args.workers)
        else:
            gammas = args.gammas if args.gammas is not None else cfg.sweep["gammas"]
            if len(gammas) < 2:
                parser.error("sweep-gamma needs at least two gamma values")
            res = sweep_gamma(cfg, out, gammas, args.workers)
    except (SchemaError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    if not args.quiet:
        for p in res.artifacts:
            print(p)
    if res.unusable:
        print(f"warning: {res.unusable} unusable grid point(s)", file=sys.stderr)
        return EXIT_UNUSABLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
