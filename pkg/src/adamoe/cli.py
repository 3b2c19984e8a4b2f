"""``adamoe-bench run <scenario.json> --out DIR`` and ``adamoe-bench report <records.csv>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import (MATERIALIZE_MAX, emit_report, load_scenario, read_records, records_to_csv,
                    report_to_csv, run_scenario)
from .core import ConfigError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adamoe-bench", description="Simulated MoE layer benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write records.csv and report.csv")
    run.add_argument("scenario", type=Path)
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--ranks-materialize-max", type=int, default=MATERIALIZE_MAX,
                     help="above this many ranks use closed-form costs (default %(default)s)")
    rep = sub.add_parser("report", help="summarize a records CSV to stdout")
    rep.add_argument("records", type=Path)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            sc = load_scenario(args.scenario)
            records = run_scenario(sc, args.seed, args.ranks_materialize_max)
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "records.csv").write_text(records_to_csv(records))
            (args.out / "report.csv").write_text(report_to_csv(emit_report(records)))
            print(f"{len(records)} records -> {args.out / 'records.csv'}")
        else:
            records = read_records(args.records.read_text())
            sys.stdout.write(report_to_csv(emit_report(records)))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
