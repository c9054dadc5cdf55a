"""Command line: run scenarios, reproduce experiments, validate scenario files."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness.experiments import DEFAULT_SEED, EXPERIMENTS, run_experiment
from .harness.metrics import write_metrics
from .harness.scenario import ScenarioError, load_scenario
from .harness.sim import run_scenario


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skyedge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", type=Path, default=Path("out"))

    exp = sub.add_parser("experiment", help="reproduce one experiment")
    exp.add_argument("tag", choices=EXPERIMENTS)
    exp.add_argument("--out", type=Path, default=None)
    exp.add_argument("--seed", type=int, default=DEFAULT_SEED)
    exp.add_argument("--workers", type=int, default=1)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True, type=Path)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            scenario = load_scenario(args.scenario)
            print(f"ok: seed={scenario.seed} duration_s={scenario.duration_s} "
                  f"platforms={len(scenario.platforms)} fleets={len(scenario.fleets)}")
            return 0
        if args.command == "run":
            scenario = load_scenario(args.scenario)
            if args.seed is not None:
                scenario = scenario.model_copy(update={"seed": args.seed})
            record = run_scenario(scenario, base_dir=args.scenario.parent)
            for path in write_metrics(record, args.out):
                print(path)
            return 0
        out = args.out or Path("out") / args.tag
        record = run_experiment(args.tag, args.seed, args.workers, out)
        print(json.dumps(record.summary["experiment"], sort_keys=True, indent=1))
        print(f"wrote {out}")
        return 0
    except ScenarioError as err:
        print(err, file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
