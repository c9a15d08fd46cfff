"""Command-line front end: run scenarios, sweep parameters, inspect traces,
and audit event logs."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import engine, metrics
from .engine import EventLog, SimulationError, run, run_baseline, replay
from .mechanisms import AdmissionError
from .resources import GpuConfig, limiting_resource
from .scenario_io import (
    ScenarioError,
    apply_override,
    load_scenario,
    load_scenario_obj,
    scenario_from_obj,
)
from .workload import TraceError, load_trace, trace_stats


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _print_scalars(report: metrics.SimReport) -> None:
    scalars = report.scalars()
    print(f"requests:              {scalars['num_requests']}")
    print(f"turnaround mean (us):  {scalars['turnaround_mean_us']:.3f}")
    print(f"turnaround var (us^2): {scalars['turnaround_variance_us2']:.3f}")
    print(f"turnaround p99 (us):   {scalars['turnaround_p99_us']:.3f}")
    print(f"best-effort makespan:  {scalars['best_effort_makespan_us']:.3f} us")
    occ = scalars["occupancy_time_weighted"]
    occ_text = ", ".join(f"{k}={v:.3f}" for k, v in occ.items())
    print(f"occupancy (weighted):  {occ_text}")
    for key, ratio in scalars["degradation_vs_baseline"].items():
        print(f"degradation {key}: {ratio:.3f}x")


def _run_with_baselines(scenario) -> tuple[engine.RunResult, metrics.SimReport]:
    result = run(scenario)
    baseline = metrics.SimReport()
    ls = [t for t in scenario.tasks if t.role == "latency-sensitive"]
    be = [t for t in scenario.tasks if t.role == "best-effort"]
    if ls:
        ls_base = run_baseline(scenario, ls[0].trace.task_id)
        baseline.turnaround_mean = ls_base.report().turnaround_mean
    if be:
        makespans = []
        for task in be:
            be_base = run_baseline(scenario, task.trace.task_id)
            makespans.append(be_base.report().best_effort_makespan)
        baseline.best_effort_makespan = max(makespans)
    report = metrics.summarize(result.log, scenario.gpu, baseline=baseline)
    return result, report


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario, seed_override=args.seed)
        result, report = _run_with_baselines(scenario)
    except (ScenarioError, TraceError, AdmissionError, SimulationError) as exc:
        return _fail(str(exc))
    metrics.write_outputs(report, result.log, args.out)
    print(f"scenario: {scenario.name}")
    _print_scalars(report)
    return 0


def cmd_sweep(args) -> int:
    try:
        base_obj = load_scenario_obj(args.scenario)
    except ScenarioError as exc:
        return _fail(str(exc))
    values = []
    for raw in args.values.split(","):
        raw = raw.strip()
        try:
            values.append(json.loads(raw))
        except json.JSONDecodeError:
            values.append(raw)
    base_dir = Path(args.scenario).parent
    base_seed = args.seed if args.seed is not None else int(
        base_obj.get("engine", {}).get("seed", 0)
    )
    rows = []
    failures = []
    out_root = Path(args.out)
    for i, value in enumerate(values):
        cell_obj = json.loads(json.dumps(base_obj))  # deep copy
        try:
            apply_override(cell_obj, args.param, value)
            cell_obj.setdefault("engine", {})["seed"] = base_seed + i
            scenario = scenario_from_obj(cell_obj, base_dir=base_dir)
            result, report = _run_with_baselines(scenario)
        except (ScenarioError, TraceError, AdmissionError, SimulationError) as exc:
            failures.append((value, str(exc)))
            print(f"cell {args.param}={value!r} failed: {exc}", file=sys.stderr)
            continue
        cell_dir = out_root / f"cell-{i:02d}"
        metrics.write_outputs(report, result.log, cell_dir)
        scalars = report.scalars()
        rows.append(
            {
                "value": value,
                "turnaround_mean_us": scalars["turnaround_mean_us"],
                "turnaround_variance_us2": scalars["turnaround_variance_us2"],
                "turnaround_p99_us": scalars["turnaround_p99_us"],
                "best_effort_makespan_us": scalars["best_effort_makespan_us"],
            }
        )
    out_root.mkdir(parents=True, exist_ok=True)
    table = out_root / "comparison.csv"
    with table.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                args.param,
                "turnaround_mean_us",
                "turnaround_variance_us2",
                "turnaround_p99_us",
                "best_effort_makespan_us",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row["value"],
                    row["turnaround_mean_us"],
                    row["turnaround_variance_us2"],
                    row["turnaround_p99_us"],
                    row["best_effort_makespan_us"],
                ]
            )
    header = f"{args.param:>24} {'mean_us':>14} {'var_us2':>16} {'p99_us':>14} {'makespan_us':>14}"
    print(header)
    for row in rows:
        print(
            f"{str(row['value']):>24} {row['turnaround_mean_us']:>14.3f} "
            f"{row['turnaround_variance_us2']:>16.3f} {row['turnaround_p99_us']:>14.3f} "
            f"{row['best_effort_makespan_us']:>14.3f}"
        )
    if failures:
        print(f"{len(failures)} sweep cell(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_trace_stats(args) -> int:
    try:
        trace = load_trace(args.trace)
        gpu = GpuConfig()
        stats = trace_stats(trace, gpu)
    except TraceError as exc:
        return _fail(str(exc))
    print(f"task: {trace.task_id} ({trace.kind})")
    print(f"total kernels:            {stats['total_kernels']}")
    print(f"large kernels:            {stats['pct_large_kernels']:.2f}%")
    print(f"long-running runtime:     {stats['pct_long_running_runtime']:.2f}%")
    print("per-kernel limiting resource:")
    for inv in trace.invocations:
        print(f"  {inv.kernel.name:<28} {limiting_resource(inv.kernel, gpu)}")
    return 0


def cmd_replay(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        log = EventLog.load(args.log)
        state = replay(log, scenario)
        fresh = run(scenario)
    except (ScenarioError, TraceError, SimulationError, OSError) as exc:
        return _fail(str(exc))
    if fresh.log != log:
        for i, (a, b) in enumerate(zip(fresh.log.events, log.events)):
            if a != b:
                return _fail(f"log diverges from a fresh run at event {i}")
        return _fail(
            f"log length {len(log)} differs from fresh run {len(fresh.log)}"
        )
    if state != fresh.final_state:
        return _fail("replayed final state differs from fresh run")
    print(f"replay ok: {len(log)} events, final time {state['time_us']:.3f} us")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smsim",
        description=(
            "Discrete-event simulator of GPU thread-block scheduling under "
            "priority streams, time-slicing, and MPS"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one scenario")
    p_run.add_argument("--scenario", required=True, help="scenario JSON path")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override seed")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario across parameter values")
    p_sweep.add_argument("--scenario", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--param", required=True, help="dotted scenario key")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_stats = sub.add_parser("trace-stats", help="classify a trace's kernels")
    p_stats.add_argument("trace", help="trace JSON path")
    p_stats.set_defaults(fn=cmd_trace_stats)

    p_replay = sub.add_parser("replay", help="audit an event log against its scenario")
    p_replay.add_argument("--scenario", required=True)
    p_replay.add_argument("log", help="events.jsonl path")
    p_replay.set_defaults(fn=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
