"""Command-line harness.

Subcommands:

* ``run``       execute one scenario file, append a CSV report row
* ``sweep``     run a scenario repeatedly while varying one parameter
* ``model``     emit analytical spill predictions as CSV
* ``generate``  materialize a scenario's dataset as a key CSV

Exit code 0 only if every executed scenario was correct and met all its
expectations.  Wall-clock timings go to stderr, never into the CSV, so
reports stay byte-identical for identical seeds and configuration.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

from . import bench, costmodel
from .core import EngineError


def _add_common(p):
    p.add_argument("--scenario", required=True, help="scenario file (ini)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="override a scenario field, e.g. generator.rows=1000")
    p.add_argument("--out", default=None, help="report CSV path")
    p.add_argument("--store-dir", default=None,
                   help="directory for spill files (default: simulated)")
    p.add_argument("--simulated-store", action="store_true",
                   help="force the in-memory store (default)")
    # convenience flags mapped onto scenario fields
    p.add_argument("--memory-rows", type=int, default=None)
    p.add_argument("--page-rows", type=int, default=None)
    p.add_argument("--operator", default=None)
    p.add_argument("--mode", default=None)
    p.add_argument("--ovc", choices=["on", "off"], default=None)
    p.add_argument("--seed", type=int, default=None)


def _flag_overrides(args):
    pairs = []
    if args.memory_rows is not None:
        pairs.append(f"scenario.memory_rows={args.memory_rows}")
    if args.page_rows is not None:
        pairs.append(f"scenario.page_rows={args.page_rows}")
    if args.operator is not None:
        pairs.append(f"scenario.operator={args.operator}")
    if args.mode is not None:
        pairs.append(f"scenario.mode={args.mode}")
    if args.ovc is not None:
        pairs.append(f"scenario.ovc={args.ovc}")
    if args.seed is not None:
        pairs.append(f"generator.seed={args.seed}")
    return pairs


def _load(args):
    return bench.load_scenario(args.scenario,
                               list(args.overrides) + _flag_overrides(args))


def _run_one(scenario, store_dir):
    store = bench.make_store(store_dir=store_dir,
                             retain_rows=scenario.retain_rows)
    t0 = time.perf_counter()
    report = bench.run_scenario(scenario, store)
    dt = time.perf_counter() - t0
    print(f"[{scenario.name}] {dt:.2f}s spilled={report['rows_spilled']} "
          f"correct={report['correct']} passed={report['passed']}",
          file=sys.stderr)
    return report


def cmd_run(args):
    scenario = _load(args)
    report = _run_one(scenario, args.store_dir)
    if args.out:
        bench.emit_report([report], args.out)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(bench.REPORT_COLUMNS)
        writer.writerow([report.get(c, "") for c in bench.REPORT_COLUMNS])
    return 0 if report["passed"] else 1


def cmd_sweep(args):
    scenario = _load(args)
    values = args.values.split(",")
    reports = []
    ok = True
    for v in values:
        scn = bench.load_scenario(
            args.scenario,
            list(args.overrides) + _flag_overrides(args)
            + [f"{args.param}={v}"])
        scn.name = f"{scn.name}[{args.param}={v}]"
        report = _run_one(scn, args.store_dir)
        reports.append(report)
        ok = ok and bool(report["passed"])
    if args.out:
        bench.emit_report(reports, args.out)
    return 0 if ok else 1


def cmd_model(args):
    rows = []
    if args.preset == "figure22":
        factors = [10 ** (e / args.points_per_decade)
                   for e in range(0, 6 * args.points_per_decade + 1)]
        rows = costmodel.figure_rows(args.I, args.M, args.P, args.F, factors)
        cols = list(rows[0].keys())
    else:
        cols = ["method", "I", "O", "M", "P", "F", "predicted_spill_rows"]
        for method in costmodel.METHODS:
            params = costmodel.ModelParams(args.I, args.O, args.M, args.P,
                                           method, args.F)
            rows.append({
                "method": method, "I": args.I, "O": args.O, "M": args.M,
                "P": args.P, "F": params.fan,
                "predicted_spill_rows": costmodel.spill_volume(params),
            })
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(out, fieldnames=cols)
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        out.close()
    return 0


def cmd_generate(args):
    scenario = _load(args)
    schema, rows = bench.generate(scenario.generator)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(out)
    writer.writerow(list(schema.key_column_names()))
    for row in rows:
        writer.writerow(row.key)
    if args.out:
        out.close()
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="insortagg-bench",
        description="scenario runner for the aggregation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario over parameter values")
    _add_common(p)
    p.add_argument("--param", required=True,
                   help="field to vary, e.g. generator.distinct")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("model", help="emit analytical spill predictions")
    p.add_argument("--preset", choices=["figure22", "single"],
                   default="single")
    p.add_argument("--I", type=int, default=1_000_000)
    p.add_argument("--O", type=int, default=100_000)
    p.add_argument("--M", type=int, default=1_000)
    p.add_argument("--P", type=int, default=100)
    p.add_argument("--F", type=int, default=None)
    p.add_argument("--points-per-decade", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_model)

    p = sub.add_parser("generate", help="write a scenario's keys as CSV")
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
