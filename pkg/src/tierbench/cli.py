"""Command-line entry point: ``run``, ``report`` and ``dryrun``."""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from tierbench import __version__
from tierbench.errors import ConfigError, DependencyError, HarnessError, TamperError
from tierbench.tiers import Tier

logger = logging.getLogger("tierbench")

EXIT_OK = 0
EXIT_UNIT_ERRORS = 1
EXIT_CONFIG = 2


def _tiers(values: Sequence[str]) -> list[str]:
    out: list[str] = []
    for v in values:
        out.extend(p.strip() for p in v.split(",") if p.strip())
    if any(p.lower() == "all" for p in out):
        return ["all"]
    for p in out:
        Tier.parse(p)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tierbench", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    run = sub.add_parser("run", help="run an experiment for one test")
    run.add_argument("--test", required=True, type=Path, help="test directory containing test.yaml")
    run.add_argument("--tier", action="append", required=True, help="T0..T6 or 'all'; repeat or comma-separate")
    run.add_argument("--runs", type=int, default=1, help="runs per subtest (default 1)")
    run.add_argument("--concurrency", type=int, default=4, help="max agent executions in flight (default 4)")
    run.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    run.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    run.add_argument("--out", type=Path, default=Path("results"), help="results directory (default ./results)")
    run.add_argument(
        "--backend",
        choices=("claude", "scripted"),
        default="claude",
        help="'scripted' replays shipped fixtures instead of calling the claude CLI",
    )

    rep = sub.add_parser("report", help="regenerate tables and figure data from run records")
    rep.add_argument("--results", required=True, type=Path)
    rep.add_argument("--out", type=Path, default=None, help="output directory (default: --results)")

    dry = sub.add_parser("dryrun", help="replay the shipped seven-tier hello-world experiment")
    dry.add_argument("--out", type=Path, default=None, help="results directory (default: a temp dir)")
    dry.add_argument("--concurrency", type=int, default=4)
    dry.add_argument("--resume", action="store_true")

    # Internal agent stand-in for scripted replays; kept out of the help listing.
    fx = sub.add_parser("fixture-agent")
    fx.add_argument("fixture_id")
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "fixture-agent"]
    return parser


def _print_summary(outcome) -> None:
    from tierbench.reporting import summary_dict

    if not outcome.records:
        print("no runs recorded")
        return
    summary = summary_dict(outcome.records)
    print(f"{'tier':<5} {'pass':>5} {'score':>6} {'grade':>5} {'cop':>12}")
    for tier, row in summary["tiers"].items():
        score = "NA" if row["mean_score"] is None else f"{row['mean_score']:.3f}"
        cop = row["cop"] if isinstance(row["cop"], str) else f"${row['cop']:.3f}"
        print(f"{tier:<5} {row['pass_rate']:>5.3f} {score:>6} {row['grade'] or 'NA':>5} {cop:>12}")
    fr = summary["totals"]["frontier_cop"]
    if fr["tier"] is not None:
        print(f"frontier CoP: {fr['tier']} ${fr['value']:.3f}")
    print(f"total cost: ${summary['totals']['total_cost']:.2f}")
    if outcome.bundle is not None:
        print(f"reports: {outcome.bundle.runs_csv.parent}")


def cmd_run(args: argparse.Namespace) -> int:
    from tierbench.runner import build_runner, describe_plan

    runner = build_runner(
        args.test,
        _tiers(args.tier),
        args.out,
        runs=args.runs,
        concurrency=args.concurrency,
        backend=args.backend,
    )
    if args.dry_run:
        print(describe_plan(runner.plan))
        return EXIT_OK
    outcome = runner.run(resume=args.resume)
    _print_summary(outcome)
    return EXIT_UNIT_ERRORS if outcome.exit_status else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from tierbench.runner import report

    if not args.results.is_dir():
        raise ConfigError(f"results directory {args.results} does not exist")
    bundle = report(args.results, args.out)
    print(f"wrote {bundle.runs_csv}, {bundle.judges_csv}, {bundle.criteria_csv}")
    if bundle.summary_json is not None:
        print(f"wrote {bundle.summary_json} and {bundle.figure_data}/")
    return EXIT_OK


def cmd_dryrun(args: argparse.Namespace) -> int:
    from tierbench.runner import dryrun

    out = args.out if args.out is not None else Path(tempfile.mkdtemp(prefix="tierbench-dryrun-"))
    outcome = dryrun(out, concurrency=args.concurrency, resume=args.resume)
    _print_summary(outcome)
    return EXIT_UNIT_ERRORS if outcome.exit_status else EXIT_OK


def cmd_fixture_agent(args: argparse.Namespace) -> int:
    """Stand-in agent used by replay scripts of scripted runs."""
    from tierbench.adapter import load_agent_fixtures, write_fixture_files

    fixtures = load_agent_fixtures()
    if args.fixture_id not in fixtures:
        raise ConfigError(f"unknown agent fixture {args.fixture_id!r}")
    fx = fixtures[args.fixture_id]
    sys.stdin.read() if not sys.stdin.isatty() else None
    write_fixture_files(fx, Path.cwd())
    sys.stdout.write(fx.stdout)
    sys.stderr.write(fx.stderr)
    return fx.exit_code


COMMANDS = {
    "run": cmd_run,
    "report": cmd_report,
    "dryrun": cmd_dryrun,
    "fixture-agent": cmd_fixture_agent,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TamperError, DependencyError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNIT_ERRORS
