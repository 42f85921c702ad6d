"""Command line entry point: ``asia run|list|describe``.

Exit status is 0 when every expectation and audit of the run holds, 1 when
any fails, and 2 for unusable input (bad flags, unknown or malformed
scenario). All configuration comes from the command line.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .harness import ScenarioError, UnknownScenario, describe_scenario, list_scenarios, run_scenario
from .netsim.faults import FaultParseError
from .netsim.topology import TopologyError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asia", description="Smart grid gateway access simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and report against its expectations")
    run.add_argument("name", nargs="?", help="bundled scenario name or scenario directory")
    run.add_argument("--scenario", help="same as NAME")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--log", metavar="PATH", help="write the event log here")
    run.add_argument("--report", metavar="PATH", help="write the metrics report here")
    run.add_argument("--quiet", action="store_true", help="print only the one-line summary")

    sub.add_parser("list", help="list bundled scenarios")

    desc = sub.add_parser("describe", help="describe a scenario")
    desc.add_argument("name")
    return p


def _run(args, parser: argparse.ArgumentParser) -> int:
    if args.name and args.scenario and args.name != args.scenario:
        parser.error("give the scenario either positionally or with --scenario, not both")
    name = args.scenario or args.name
    if not name:
        parser.error("run needs a scenario")
    result = run_scenario(name, seed=args.seed, log_path=args.log, report_path=args.report)
    if args.quiet:
        print(result.report.summary())
    else:
        print(result.report.text(), end="")
    return result.exit_status


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            for name, desc in list_scenarios():
                print(f"{name:<20} {desc}")
            return 0
        if args.command == "describe":
            print(describe_scenario(args.name))
            return 0
        return _run(args, parser)
    except UnknownScenario as exc:
        print(f"asia: unknown scenario {exc}", file=sys.stderr)
    except (ScenarioError, TopologyError, FaultParseError, OSError) as exc:
        print(f"asia: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
