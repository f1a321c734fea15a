"""``bench`` command line."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from sigbench import bench
from sigbench.netsim import SimConfig, check_safety, load_config, run


def _micro(args) -> int:
    result = bench.microbench(args.scheme, args.iterations, args.repetitions)
    width = max(map(len, result.costs_ns))
    for op, ns in result.costs_ns.items():
        print(f"{op:<{width}}  {ns / 1000:12.2f} us   spread {result.spread[op]:.2f}")
    for op in result.noisy:
        print(f"warning: {op} varied by more than {bench.NOISE_THRESHOLD:.0%} across repetitions", file=sys.stderr)
    if args.json:
        Path(args.json).write_text(json.dumps(result.costs_ns, indent=2) + "\n")
    return 0


def _calibrate(args) -> int:
    data = bench.calibrate(args.iterations, args.repetitions)
    bench.save_calibration(data, args.out)
    bls, ed = data["schemes"]["bls"]["verify"], data["schemes"]["eddsa"]["verify"]
    print(f"wrote {args.out}: BLS verify {bls / 1000:.1f} us, EdDSA verify {ed / 1000:.1f} us ({bls / ed:.1f}x)")
    return 0


def _base_config(path) -> SimConfig:
    return load_config(path) if path else SimConfig()


def _run(args) -> int:
    base = _base_config(args.config)
    if args.grid:
        grid = bench.ExperimentGrid.load(args.grid)
    else:
        grid = bench.ExperimentGrid(((base.n, base.scheme, base.rate),), args.repetitions, base.seed)
    if args.duration:
        base = replace(base, duration=args.duration)
    for report in _progress(bench.iter_experiment(grid, base), args.out):
        if report.rep not in ("mean", "std"):
            print(f"n={report.n:<3} {report.scheme:<5} rate={report.rate:<8g} rep={report.rep} "
                  f"tps={report.tps:9.1f} p50={report.lat_p50_ms:8.1f} ms vc={report.viewchanges:g}")
    print(f"wrote {args.out}")
    if args.figures:
        from sigbench.plotting import render_figures

        for path in render_figures(args.out, args.figures):
            print(f"wrote {path}")
    return 0


def _progress(reports, out):
    with bench.CsvAppender(out) as appender:
        for report in reports:
            appender.write(report)
            yield report


def _simulate(args) -> int:
    config = _base_config(args.config)
    trace = run(config)
    report = bench.metrics(trace)
    for name, value in zip(bench.CSV_COLUMNS, report.row()):
        print(f"{name:<18} {value}")
    problems = check_safety(trace)
    if args.trace:
        trace.export(args.trace)
    for p in problems:
        print(f"safety: {p}", file=sys.stderr)
    return 1 if problems else 0


def _storage(args) -> int:
    report = bench.report_storage(args.n, args.participation)
    for name, value in report.rows():
        print(f"{name:<22} {value}")
    return 0


def _plot(args) -> int:
    from sigbench.plotting import render_figures

    for path in render_figures(args.csv, args.out_dir):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="BLS vs EdDSA quorum certificate benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("micro", help="time signature operations on this host")
    p.add_argument("--scheme", choices=["eddsa", "bls"], required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--json", help="also write the costs (ns) to this file")
    p.set_defaults(func=_micro)

    p = sub.add_parser("calibrate", help="measure both schemes and write a cost file for the simulator")
    p.add_argument("--out", default="calibration.json")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--repetitions", type=int, default=5)
    p.set_defaults(func=_calibrate)

    p = sub.add_parser("run", help="run an experiment grid and write a CSV")
    p.add_argument("--config", help="TOML simulation settings")
    p.add_argument("--grid", help="TOML grid of committee sizes, schemes and rates")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--figures", help="directory for PNG figures rendered from the CSV")
    p.add_argument("--repetitions", type=int, default=1, help="used when no grid is given")
    p.add_argument("--duration", type=float, help="override simulated seconds")
    p.set_defaults(func=_run)

    p = sub.add_parser("simulate", help="run one configuration and print its metrics")
    p.add_argument("--config", help="TOML simulation settings")
    p.add_argument("--trace", help="write the event log (tab separated) here")
    p.set_defaults(func=_simulate)

    p = sub.add_parser("storage", help="certificate sizes for a committee")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--participation", type=float, default=1.0)
    p.set_defaults(func=_storage)

    p = sub.add_parser("plot", help="render figures from an experiment CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out-dir", default="figures")
    p.set_defaults(func=_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
