"""Command line entry points.

simulate  run one scenario and write its metrics row as CSV
sweep     run a SweepSpec, write runs.csv and aggregate.csv
check     evaluate trend expectations against a runs CSV
calibrate grid-search demand/charger defaults, write the chosen config
report    render figures from a runs CSV, next to it by default
serve     start the HTTP/WebSocket control service
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import SimulationError
from .experiments import (METRIC_COLUMNS, calibrate_defaults, check_trends,
                          run_sweep, _arrival_hash, _table_csv)
from .scenario import ScenarioConfig, SweepSpec
from .simulation import Simulation


def _cmd_simulate(args) -> int:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg = cfg.replaced(master_seed=args.seed)
    until = args.until if args.until is not None else cfg.horizon_s
    sim = Simulation(cfg)
    sim.run_until(until)
    rep = sim.report()
    row = {"seed": cfg.master_seed, "config_hash": cfg.config_hash(),
           "arrival_hash": _arrival_hash(sim.log)}
    row.update(rep.scalar_row())
    text = _table_csv(["seed", "config_hash", "arrival_hash"] + METRIC_COLUMNS,
                      [row])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec)
    result = run_sweep(spec)
    runs_path, agg_path = result.write(args.out)
    print(runs_path)
    print(agg_path)
    return 0


def _cmd_check(args) -> int:
    report = check_trends(args.csv, args.expect)
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 2


def _cmd_calibrate(args) -> int:
    report = calibrate_defaults(out_path=args.out)
    chosen = report["chosen"]
    print(json.dumps(chosen))
    if args.out:
        print(args.out)
    return 0


def _cmd_report(args) -> int:
    from .report import render_figures
    for path in render_figures(args.csv, out_dir=args.out):
        print(path)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .gateway import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="etaxisim", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario")
    s.add_argument("--config", help="scenario JSON (default: shipped config)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--until", type=float, default=None,
                   help="virtual seconds (default: config horizon)")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(fn=_cmd_simulate)

    s = sub.add_parser("sweep", help="run a sweep spec")
    s.add_argument("--spec", required=True, help="SweepSpec JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=_cmd_sweep)

    s = sub.add_parser("check", help="evaluate trend expectations")
    s.add_argument("--csv", required=True, help="runs CSV from sweep")
    s.add_argument("--expect", required=True, help="expectations JSON")
    s.set_defaults(fn=_cmd_check)

    s = sub.add_parser("calibrate", help="grid-search shipped defaults")
    s.add_argument("--out", help="write chosen config JSON here")
    s.set_defaults(fn=_cmd_calibrate)

    s = sub.add_parser("report", help="render figures from a runs CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", help="figure directory (default: beside the CSV)")
    s.set_defaults(fn=_cmd_report)

    s = sub.add_parser("serve", help="start the control service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(fn=_cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SimulationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
