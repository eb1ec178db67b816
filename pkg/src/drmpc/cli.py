"""Command line entry point: ``drmpc run`` and ``drmpc sweep``.

Exit codes
----------
0  lap completed without collision (``sweep``: table written)
2  usage error
3  collision
4  controller aborted on an infeasible stage (strict mode)
5  numeric failure
6  I/O error
7  lap not completed within ``sim.max_time``
8  invalid scenario
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .scenario import ScenarioError, load_scenario, write_scenario
from .sim import run_closed_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_COLLISION = 3
EXIT_INFEASIBLE = 4
EXIT_NUMERIC = 5
EXIT_IO = 6
EXIT_INCOMPLETE = 7
EXIT_SCENARIO = 8

STATUS_CODES = {
    "lap-completed": EXIT_OK,
    "collision": EXIT_COLLISION,
    "infeasible-abort": EXIT_INFEASIBLE,
    "numeric-failure": EXIT_NUMERIC,
    "timeout": EXIT_INCOMPLETE,
}

SWEEP_COLUMNS = ("controller", "theta", "seed", "status", "collision", "lap_completed", "lap_time",
                 "accumulated_cost", "avg_solve_time", "min_clearance", "scenario_hash")

log = logging.getLogger("drmpc")


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    return vals


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drmpc", description="Risk-constrained MPC closed-loop simulator.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one closed-loop lap")
    r.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    r.add_argument("--controller", choices=["drmpc", "saa"], default=None)
    r.add_argument("--theta", type=float, default=None, help="ambiguity radius (overrides the scenario)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default="out", help="output directory")
    r.add_argument("--strict", action="store_true", help="abort on the first infeasible stage instead of braking")
    r.add_argument("--timing-in-trace", action="store_true",
                   help="write wall-clock solve times into trace.csv (breaks byte-for-byte reproducibility)")

    s = sub.add_parser("sweep", help="run a grid of radii and seeds and write a comparison table")
    s.add_argument("scenario")
    s.add_argument("--thetas", type=_float_list, required=True, help="comma-separated radii")
    s.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds (default: scenario seed)")
    s.add_argument("--controller", choices=["drmpc", "saa"], default="drmpc")
    s.add_argument("--out", default="sweep", help="output directory")
    s.add_argument("--jobs", type=int, default=1)
    return p


def _prepare_dir(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write-test"
    probe.write_text("")
    probe.unlink()


def run(scenario, controller=None, theta=None, seed=None, out_dir="out", strict=False,
        timing_in_trace=False) -> int:
    """Run one lap, write ``trace.csv``, ``timing.csv``, ``summary.json`` and the
    resolved scenario, and return the exit code."""
    out = Path(out_dir)
    try:
        _prepare_dir(out)
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return EXIT_IO
    trace = run_closed_loop(scenario, controller_kind=controller, seed=seed, theta=theta, strict=strict)
    try:
        (out / "trace.csv").write_text(trace.to_csv(include_timing=timing_in_trace))
        (out / "timing.csv").write_text(trace.timing_csv())
        (out / "summary.json").write_text(trace.summary_json())
        write_scenario(scenario.with_overrides(controller_kind=controller, seed=seed, theta=theta, strict=strict),
                       out / "scenario.resolved.scenario")
    except OSError as exc:
        log.error("cannot write outputs to %s: %s", out, exc)
        return EXIT_IO
    return STATUS_CODES.get(trace.summary["status"], EXIT_NUMERIC)


def _sweep_cell(args):
    scenario, controller, theta, seed = args
    trace = run_closed_loop(scenario, controller_kind=controller, seed=seed, theta=theta)
    return trace.summary


def sweep(scenario, thetas, seeds=None, controller="drmpc", jobs=1) -> list:
    """One summary row per (theta, seed); a failing cell is reported, not raised."""
    if not thetas:
        raise ValueError("at least one theta is required")
    seeds = [scenario.seed] if not seeds else list(seeds)
    cells = [(scenario, controller, th, sd) for th in thetas for sd in seeds]
    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_sweep_cell, c) for c in cells]
            results = []
            for c, f in zip(cells, futures):
                try:
                    results.append(f.result())
                except Exception as exc:  # noqa: BLE001 -- a cell failure must not stop the sweep
                    results.append({"status": f"error: {exc}", "theta": c[2], "seed": c[3], "controller": c[1]})
    else:
        results = []
        for c in cells:
            try:
                results.append(_sweep_cell(c))
            except Exception as exc:  # noqa: BLE001
                results.append({"status": f"error: {exc}", "theta": c[2], "seed": c[3], "controller": c[1]})
    for summary in results:
        rows.append({k: summary.get(k) for k in SWEEP_COLUMNS})
    return rows


def sweep_table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = load_scenario(args.scenario)
    except OSError as exc:
        log.error("cannot read scenario: %s", exc)
        return EXIT_IO
    except ScenarioError as exc:
        log.error("invalid scenario: %s", exc)
        return EXIT_SCENARIO
    if args.command == "run":
        code = run(sc, args.controller, args.theta, args.seed, args.out, args.strict, args.timing_in_trace)
        summary = Path(args.out) / "summary.json"
        if summary.exists():
            sys.stdout.write(summary.read_text())
        return code
    if not args.thetas:
        parser.print_usage(sys.stderr)
        sys.stderr.write("drmpc sweep: error: --thetas must list at least one value\n")
        return EXIT_USAGE
    if args.jobs < 1:
        sys.stderr.write("drmpc sweep: error: --jobs must be >= 1\n")
        return EXIT_USAGE
    rows = sweep(sc, args.thetas, args.seeds, args.controller, args.jobs)
    table = sweep_table_csv(rows)
    try:
        out = Path(args.out)
        _prepare_dir(out)
        (out / "sweep.csv").write_text(table)
    except OSError as exc:
        log.error("cannot write sweep table: %s", exc)
        return EXIT_IO
    sys.stdout.write(table)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
