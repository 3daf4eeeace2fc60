"""Command-line entry point: ``fusebo run | compare | trend``.

Exit codes: 0 success, 2 bad spec or input, 3 evaluator failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    COMPARE_COLUMNS,
    CURVE_COLUMNS,
    TREND_COLUMNS,
    AnalysisError,
    SpecError,
    best_so_far_curves,
    compare_logs,
    load_logs,
    load_spec,
    cmd_run,
    to_csv,
    trend_from_logs,
    trend_from_space,
)
from .objective import EvaluatorError

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_EVALUATOR = 3

log = logging.getLogger("fusebo")


def _thresholds(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("need at least one threshold")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusebo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run paired BO / random-search experiments")
    r.add_argument("spec", help="experiment spec (JSON)")
    r.add_argument("--seed", type=int, help="override the base seed")
    r.add_argument("--runs", type=int, help="override the number of runs")
    r.add_argument("--out", help="output directory (default: spec 'output')")
    r.add_argument("--timing", action="store_true", help="record wall time per trial (logs stop being byte-reproducible)")

    c = sub.add_parser("compare", help="iterations-to-threshold table from a log directory")
    c.add_argument("dir")
    c.add_argument("--thresholds", type=_thresholds, default=[0.7, 0.8, 0.9])
    c.add_argument("--out", help="write the CSV here instead of stdout")
    c.add_argument("--curves", help="also write per-iteration best-so-far curves to this CSV")

    t = sub.add_parser("trend", help="|delta objective| versus graph distance")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("spec", nargs="?", help="experiment spec; enumerates the whole space")
    src.add_argument("--logs", help="use the nets evaluated in this log directory")
    t.add_argument("--seed", type=int, help="override the base seed")
    t.add_argument("--out", help="directory for trend.csv and trend.json (default: stdout)")
    return p


def _emit(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            spec = load_spec(args.spec, seed=args.seed, runs=args.runs)
            summary = cmd_run(spec, args.out, timing=args.timing)
            print(
                f"{summary.out_dir}: {len(summary.completed)} run(s) done, "
                f"{len(summary.skipped)} skipped, {len(summary.failed)} failed"
            )
            for i, msg in summary.failed.items():
                print(f"run {i}: {msg}", file=sys.stderr)
            return EXIT_EVALUATOR if summary.failed else EXIT_OK

        if args.command == "compare":
            logs = load_logs(args.dir)
            _emit(to_csv(compare_logs(logs, args.thresholds), COMPARE_COLUMNS), args.out)
            if args.curves:
                _emit(to_csv(best_so_far_curves(logs), CURVE_COLUMNS), args.curves)
            return EXIT_OK

        if args.command == "trend":
            if args.logs:
                trend = trend_from_logs(args.logs)
            else:
                trend = trend_from_space(load_spec(args.spec, seed=args.seed))
            table = to_csv(trend.rows, TREND_COLUMNS)
            summary = json.dumps(trend.summary(), indent=2, sort_keys=True) + "\n"
            if args.out:
                _emit(table, str(Path(args.out) / "trend.csv"))
                _emit(summary, str(Path(args.out) / "trend.json"))
            else:
                sys.stdout.write(table + summary)
            return EXIT_OK
    except (SpecError, AnalysisError) as exc:
        print(f"fusebo: error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except EvaluatorError as exc:
        print(f"fusebo: error: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
