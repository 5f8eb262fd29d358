"""Command line entry point: ``dscache --scenario FILE --out DIR``.

Exit status: 0 when every comparison passes, 1 when any fails, 2 on a
configuration or parse error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigurationError
from .harness import ScenarioError, load_scenario, override, run_scenario
from .report import emit_report

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dscache", description="Replay a streaming scenario through KV-cache policies.")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out", help="report directory (default: no files written)")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl",
                   help="jsonl writes report.jsonl; csv also writes summary.csv")
    p.add_argument("--policy", help="comma-separated policy ids to run (overrides the scenario)")
    p.add_argument("--seed", type=_u64, help="override the scenario seed")
    p.add_argument("--check", action="store_true", help="run comparisons only; no per-query records")
    p.add_argument("--precision", choices=("f32", "f64"), help="override model precision")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        scenario = load_scenario(args.scenario)
        policies = [p.strip() for p in args.policy.split(",") if p.strip()] if args.policy else None
        if args.seed is not None or args.precision or policies:
            scenario = override(scenario, args.seed, args.precision, policies)
        result = run_scenario(scenario, include_metrics=not args.check)
    except ScenarioError as e:
        for d in e.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    for name, kind, v in result.verdicts:
        status = "PASS" if v.passed else "FAIL"
        extra = f" ({v.detail})" if v.detail else ""
        print(f"{status} {kind} {name}: delta={v.delta:.6g}{extra}")
    if args.out:
        try:
            for path in emit_report(result.records, args.out, args.format):
                print(f"wrote {path}")
        except OSError as e:
            print(f"error: cannot write report: {e}", file=sys.stderr)
            return EXIT_CONFIG
    return EXIT_OK if result.ok else EXIT_FAILED
