"""Command-line entry point.

Exit codes: 0 medal/success, 2 no medal (or a failed check), 3 fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from ideloop import history, stats
from ideloop.actions import action_schema
from ideloop.harness import EXIT_FAULT, EXIT_NO_MEDAL, EXIT_SUCCESS, RunConfig, run

logger = logging.getLogger("ideloop")


def _cmd_run(args) -> int:
    config = RunConfig.load(args.config)
    outcome = run(config, args.out)
    print(json.dumps(outcome.to_dict(), sort_keys=True))
    return outcome.exit_code


def _cmd_replay(args) -> int:
    try:
        report = history.replay(args.run_dir, args.out)
    except history.ReplayDivergence as exc:
        print(f"DIVERGENCE turn={exc.turn} field={exc.field}", file=sys.stderr)
        return EXIT_NO_MEDAL
    print(f"replayed {report.turns} turns, 0 divergences")
    return EXIT_SUCCESS


def _parse_overrides(items):
    out = {}
    for item in items or ():
        name, _, est = item.partition("=")
        if est not in stats.ESTIMATORS:
            raise ValueError(f"bad estimator override {item!r}")
        out[name] = est
    return out


def _cmd_verify_stats(args) -> int:
    outcomes = stats.load_outcomes(args.outcomes)
    subset_map = json.loads(Path(args.subsets).read_text()) if args.subsets else None
    result = stats.medal_stats(outcomes, subset_map, args.estimator, _parse_overrides(args.estimator_for))
    if args.json:
        print(json.dumps([s.to_dict() for s in result.values()], indent=1))
    else:
        print(stats.format_stats_table(result))
    if not args.expect:
        return EXIT_SUCCESS
    expected = json.loads(Path(args.expect).read_text())
    failed = False
    for name, want in expected.items():
        got = result.get(name)
        if got is None:
            print(f"FAIL {name}: subset missing", file=sys.stderr)
            failed = True
            continue
        for key in ("mean", "std"):
            if key in want and round(getattr(got, key), 4) != round(want[key], 4):
                print(f"FAIL {name} {key}: {getattr(got, key):.4f} != {want[key]:.4f}", file=sys.stderr)
                failed = True
        if "n" in want and got.n != want["n"]:
            print(f"FAIL {name} n: {got.n} != {want['n']}", file=sys.stderr)
            failed = True
    return EXIT_NO_MEDAL if failed else EXIT_SUCCESS


def _cmd_report(args) -> int:
    rows = json.loads(Path(args.stats).read_text())
    print(stats.leaderboard_report(rows))
    if args.failed_tasks:
        failed = json.loads(resources.files("ideloop.data").joinpath("failed_tasks.json").read_text())
        print()
        print("No medal in any seed (data or environment failures):")
        for name in failed["failed"]:
            print(f"  - {name}")
        for item in failed.get("excluded", []):
            print(f"Excluded: {item['task']} ({item['reason']})")
    return EXIT_SUCCESS


def _cmd_schema(args) -> int:
    print(json.dumps(action_schema(), indent=2))
    return EXIT_SUCCESS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ideloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("replay", help="re-drive a recorded run and check for divergence")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None, help="where to write the replayed run")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("verify-stats", help="medal-rate table from an outcome file")
    p.add_argument("--outcomes", required=True, help="JSON lines, one outcome per run")
    p.add_argument("--subsets", help="JSON object mapping task_id to subset")
    p.add_argument("--estimator", choices=stats.ESTIMATORS, default="n")
    p.add_argument("--estimator-for", action="append", metavar="SUBSET=EST",
                   help="per-subset estimator override, e.g. Lite=n-1")
    p.add_argument("--expect", help="JSON {subset: {mean, std, n}} to check at 4 decimals")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_verify_stats)

    p = sub.add_parser("report", help="leaderboard table from per-agent stats")
    p.add_argument("--stats", required=True)
    p.add_argument("--failed-tasks", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("schema", help="print the action JSON schema")
    p.set_defaults(func=_cmd_schema)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every fault maps to one exit code
        logger.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            logger.exception("traceback")
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
