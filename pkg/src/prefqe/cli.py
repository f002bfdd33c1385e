"""Command-line entry point: ``prefqe run|slopes|verify``."""

from __future__ import annotations

import argparse
import sys

from .bench import fit_decay_slope, read_records, run_experiment, verify_records
from .errors import ConfigError, SizeError


def _parse_where(items):
    out = {}
    for item in items or []:
        key, _, value = item.partition("=")
        if not value:
            raise SystemExit(f"--where expects column=value, got {item!r}")
        out[key] = float(value)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="prefqe", description="Preference-based off-policy evaluation sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every grid cell of a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None, help="overrides PREFQE_WORKERS")

    p_slope = sub.add_parser("slopes", help="log-log decay slope of median error")
    p_slope.add_argument("records")
    p_slope.add_argument("--x", choices=["K", "KHF"], required=True)
    p_slope.add_argument("--y", choices=["abs_err", "reward_mse"], required=True)
    p_slope.add_argument("--where", action="append", metavar="COL=VALUE",
                         help="keep only rows with this column value (repeatable)")
    p_slope.add_argument("--boot", type=int, default=2000)

    p_ver = sub.add_parser("verify", help="recompute v_true for every record")
    p_ver.add_argument("records")

    args = parser.parse_args(argv)
    if args.command == "run":
        try:
            return run_experiment(args.config, workers=args.workers)
        except ConfigError as exc:
            print(f"{args.config}: {exc}", file=sys.stderr)
            return 2
        except OSError as exc:
            print(f"{args.config}: {exc}", file=sys.stderr)
            return 2
    if args.command == "slopes":
        where = _parse_where(args.where)
        rows = [r for r in read_records(args.records) if all(r[k] == v for k, v in where.items())]
        try:
            fit = fit_decay_slope(rows, args.x, args.y, n_boot=args.boot)
        except (SizeError, ValueError) as exc:
            print(f"slopes: {exc}", file=sys.stderr)
            return 2
        print(f"slope {fit.slope:.6g}  intercept {fit.intercept:.6g}  "
              f"95% band [{fit.band[0]:.6g}, {fit.band[1]:.6g}]")
        for x, y in zip(fit.x, fit.median_y):
            print(f"  {args.x}={x:g}  median {args.y}={y:.6g}")
        return 0
    problems = verify_records(args.records)
    for p in problems:
        print(p, file=sys.stderr)
    print(f"{'FAIL' if problems else 'OK'}: {len(problems)} problem(s)")
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
