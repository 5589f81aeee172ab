"""Command-line entry point.

Failures print one JSON object on stderr, e.g.
``{"error": "config", "message": "steps must be an integer >= 1, got 0"}``,
and exit nonzero:

==  =====================================================
1   internal error
2   bad arguments or configuration
3   output directory not writable
4   a run stopped early on a non-finite gradient
==  =====================================================
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ConfigError, load_config

EXIT_INTERNAL, EXIT_CONFIG, EXIT_OUTPUT, EXIT_NONFINITE = 1, 2, 3, 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scoredistill", description="Score-distillation experiments against an analytic mixture oracle.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML experiment file")
        sp.add_argument("--seed", type=_int_list, help="comma-separated seeds, replaces the config list")
        sp.add_argument("--out", help="output directory, replaces output_dir")
        sp.add_argument("--overtrain", type=float, help="overtrain factor (>= 1)")
        sp.add_argument("--jobs", type=int, help="worker processes across seeds")

    common(sub.add_parser("run", help="run the configured combiner for every seed"))
    sw = sub.add_parser("sweep-lambda", help="BSD runs over a list of lambda values")
    common(sw)
    sw.add_argument("--lambdas", type=_float_list, help="comma-separated lambdas, replaces sweep.lambdas")
    common(sub.add_parser("angle-census", help="guidance angle and norm statistics on matched draws"))
    common(sub.add_parser("compare", help="run several combiners on the same seeds"))
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _config(args):
    return load_config(args.config).with_overrides(
        seeds=args.seed, output_dir=args.out, overtrain_factor=args.overtrain, jobs=args.jobs
    )


def _dispatch(args) -> int:
    cfg = _config(args)
    out = cfg.output_dir
    n_aborted = 0
    if args.command == "run":
        ms = harness.run_experiment(cfg)
        n_aborted = sum(m.aborted for m in ms)
        print(f"wrote {out / 'summary.csv'} ({len(ms)} seeds)")
    elif args.command == "sweep-lambda":
        lambdas = args.lambdas if args.lambdas is not None else cfg.lambdas
        if not lambdas or any(not lam > 0 for lam in lambdas):
            raise ConfigError("lambdas must be a non-empty list of positive numbers")
        rows = harness.sweep_lambda(cfg, lambdas)
        n_aborted = sum(r["n_aborted"] for r in rows)
        print(f"wrote {out / 'sweep_lambda.csv'} ({len(rows)} lambdas)")
    elif args.command == "angle-census":
        harness.angle_census(cfg)
        print(f"wrote census files for {len(cfg.seeds)} seeds to {out}")
    else:
        rows = harness.compare(cfg)
        n_aborted = sum(r["n_aborted"] for r in rows)
        print(f"wrote {out / 'compare.csv'} ({len(rows)} combiners)")
    if n_aborted:
        return _fail("nonfinite", f"{n_aborted} run(s) stopped early on a non-finite gradient", EXIT_NONFINITE)
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _dispatch(args)
    except _UsageError as exc:
        return _fail("usage", str(exc), EXIT_CONFIG)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except harness.OutputError as exc:
        return _fail("output", str(exc), EXIT_OUTPUT)
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable report
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
