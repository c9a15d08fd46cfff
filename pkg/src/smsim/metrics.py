"""Performance metrics derived from event logs.

Three headline numbers: per-request turnaround statistics for the
latency-sensitive task, their variance (predictability), and the
best-effort task's makespan, which stands in for utilization: a device
with no room for another block is not necessarily doing more useful work,
but a best-effort task finishing sooner is. Occupancy time series are kept
per resource dimension for the same reason.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .block_scheduler import SmState
from .engine import EventLog
from .resources import RESOURCE_KINDS, GpuConfig, ResourceVector


class IncompleteLogError(Exception):
    """The log ends mid-run (a request arrived but never completed)."""


def turnaround(arrival: float, completion: float) -> float:
    """Completion minus arrival time of one request, in microseconds."""
    if completion < arrival:
        raise ValueError(
            f"negative turnaround: completion {completion} before arrival {arrival}"
        )
    return completion - arrival


def occupancy_snapshot(sms: list[SmState], gpu: GpuConfig) -> dict:
    """Instantaneous per-resource utilization fractions across all SMs."""
    used = ResourceVector()
    for sm in sms:
        used = used + (sm.limits - sm.free)
    totals = gpu.sm_limits.scaled(gpu.num_sms)
    return {
        kind: (used.get(kind) / totals.get(kind) if totals.get(kind) else 0.0)
        for kind in RESOURCE_KINDS
    }


@dataclass
class SimReport:
    per_request_turnaround: list[float] = field(default_factory=list)
    turnaround_mean: float = 0.0
    turnaround_variance: float = 0.0
    turnaround_p99: float = 0.0
    best_effort_makespan: float = 0.0
    occupancy_series: list[tuple[float, dict]] = field(default_factory=list)
    occupancy_time_weighted: dict = field(default_factory=dict)
    degradation_vs_baseline: dict = field(default_factory=dict)
    requests: list[dict] = field(default_factory=list)

    def scalars(self) -> dict:
        return {
            "num_requests": len(self.per_request_turnaround),
            "turnaround_mean_us": self.turnaround_mean,
            "turnaround_variance_us2": self.turnaround_variance,
            "turnaround_p99_us": self.turnaround_p99,
            "best_effort_makespan_us": self.best_effort_makespan,
            "occupancy_time_weighted": self.occupancy_time_weighted,
            "degradation_vs_baseline": self.degradation_vs_baseline,
        }


def _percentile_nearest_rank(values: list[float], pct: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize(
    log: EventLog, gpu: GpuConfig, baseline: Optional[SimReport] = None
) -> SimReport:
    """Populate a SimReport from a completed run's event log.

    Degradation ratios (concurrent / baseline) are filled when a baseline
    report is supplied.
    """
    arrivals: dict[tuple[str, int], float] = {}
    starts: dict[tuple[str, int], float] = {}
    completions: dict[tuple[str, int], float] = {}
    ls_task: Optional[str] = None
    be_makespan = 0.0
    last_time = 0.0

    totals = gpu.sm_limits.scaled(gpu.num_sms)
    occupied = ResourceVector()
    series: list[tuple[float, dict]] = []
    weighted = {kind: 0.0 for kind in RESOURCE_KINDS}
    prev_time = 0.0

    def fractions() -> dict:
        return {
            kind: (occupied.get(kind) / totals.get(kind) if totals.get(kind) else 0.0)
            for kind in RESOURCE_KINDS
        }

    def account(until: float) -> None:
        nonlocal prev_time
        dt = until - prev_time
        if dt > 0:
            for kind in RESOURCE_KINDS:
                weighted[kind] += occupied.get(kind) / totals.get(kind) * dt
        prev_time = until

    def occupancy_change(t: float, delta: ResourceVector, sign: int) -> None:
        nonlocal occupied
        account(t)
        occupied = occupied + delta.scaled(sign)
        frac = fractions()
        if series and series[-1][0] == t:
            series[-1] = (t, frac)
        else:
            series.append((t, frac))

    for record in log:
        t = record["time_us"]
        last_time = max(last_time, t)
        kind = record["kind"]
        if kind == "request-arrival":
            if record["role"] == "latency-sensitive":
                ls_task = record["task"]
                arrivals[(record["task"], record["request"])] = t
        elif kind in ("kernel-arrival", "transfer-start"):
            key = (record["task"], record["request"])
            if key in arrivals and key not in starts:
                starts[key] = t
        elif kind == "block-dispatch":
            occupancy_change(t, ResourceVector(**record["demand"]), +1)
        elif kind == "block-complete":
            occupancy_change(t, ResourceVector(**record["demand"]), -1)
        elif kind == "preempt-save-done":
            for victim in record.get("victims", []):
                occupancy_change(t, ResourceVector(**victim["demand"]), -1)
        elif kind == "task-complete":
            if record["role"] == "best-effort":
                be_makespan = max(be_makespan, t)
        if record.get("completes_request") is not None:
            completions[(record["request_task"], record["completes_request"])] = t

    account(last_time)
    if last_time > 0:
        time_weighted = {kind: weighted[kind] / last_time for kind in RESOURCE_KINDS}
    else:
        time_weighted = {kind: 0.0 for kind in RESOURCE_KINDS}

    requests = []
    turnarounds = []
    if ls_task is not None:
        for (task, req), arrived in sorted(arrivals.items(), key=lambda kv: kv[0][1]):
            if task != ls_task:
                continue
            if (task, req) not in completions:
                raise IncompleteLogError(
                    f"request {req} of task {task!r} arrived but never completed"
                )
            completed = completions[(task, req)]
            requests.append(
                {
                    "request": req,
                    "arrival_us": arrived,
                    "start_us": starts.get((task, req), arrived),
                    "completion_us": completed,
                    "turnaround_us": turnaround(arrived, completed),
                }
            )
            turnarounds.append(requests[-1]["turnaround_us"])

    report = SimReport(
        per_request_turnaround=turnarounds,
        occupancy_series=series,
        occupancy_time_weighted=time_weighted,
        best_effort_makespan=be_makespan,
        requests=requests,
    )
    if turnarounds:
        mean = sum(turnarounds) / len(turnarounds)
        report.turnaround_mean = mean
        report.turnaround_variance = sum((x - mean) ** 2 for x in turnarounds) / len(
            turnarounds
        )
        report.turnaround_p99 = _percentile_nearest_rank(turnarounds, 99.0)
    if baseline is not None:
        degradation = {}
        if baseline.turnaround_mean > 0 and turnarounds:
            degradation["turnaround_mean"] = (
                report.turnaround_mean / baseline.turnaround_mean
            )
        if baseline.best_effort_makespan > 0 and be_makespan > 0:
            degradation["best_effort_makespan"] = (
                be_makespan / baseline.best_effort_makespan
            )
        report.degradation_vs_baseline = degradation
    return report


# --- log analysis helpers used by audits and tests ---------------------------


def execution_segments(log: EventLog) -> dict[str, list[tuple[float, float, str]]]:
    """Per-block wall-clock execution windows [(start, end, task)], split at
    checkpoints; derived purely from the log."""
    open_blocks: dict[str, tuple[float, str]] = {}
    segments: dict[str, list[tuple[float, float, str]]] = {}
    for record in log:
        kind = record["kind"]
        if kind == "block-dispatch":
            key = f"{record['kernel']}/b{record['block_index']}"
            open_blocks[key] = (record["exec_start_us"], record["task"])
        elif kind == "block-complete":
            key = f"{record['kernel']}/b{record['block_index']}"
            start, task = open_blocks.pop(key)
            segments.setdefault(key, []).append((start, record["time_us"], task))
        elif kind == "preempt-save-done":
            for victim in record.get("victims", []):
                key = victim["block"]
                start, task = open_blocks.pop(key)
                frozen = victim["frozen_at_us"]
                segments.setdefault(key, []).append((start, frozen, task))
    return segments


def kernel_dispatch_delays(log: EventLog, task: str) -> list[tuple[str, float]]:
    """(kernel, first-dispatch-time minus arrival-time) for every kernel of
    ``task`` in the log."""
    arrivals: dict[str, float] = {}
    first_dispatch: dict[str, float] = {}
    for record in log:
        if record["kind"] == "kernel-arrival" and record["task"] == task:
            arrivals[record["kernel"]] = record["time_us"]
        elif record["kind"] == "block-dispatch" and record["task"] == task:
            first_dispatch.setdefault(record["kernel"], record["time_us"])
    out = []
    for kernel, arrived in arrivals.items():
        if kernel in first_dispatch:
            out.append((kernel, first_dispatch[kernel] - arrived))
    return out


def check_exclusive_execution(log: EventLog, process_of: dict[str, int]) -> None:
    """Assert no instant has executing blocks from two different processes.

    ``process_of`` maps task ids to process ids. Sweep over segment
    endpoints, closing before opening at equal times, so back-to-back
    handoffs at an instant do not count as overlap. Raises AssertionError
    on the first violation.
    """
    endpoints = []
    for key, segs in execution_segments(log).items():
        for start, end, task in segs:
            if end > start:
                pid = process_of[task]
                endpoints.append((start, 1, pid, key))
                endpoints.append((end, 0, pid, key))
    endpoints.sort(key=lambda e: (e[0], e[1]))  # ends (0) before starts (1)
    open_count: dict[int, int] = {}
    for time, edge, pid, key in endpoints:
        if edge == 0:
            open_count[pid] -= 1
            if open_count[pid] == 0:
                del open_count[pid]
        else:
            open_count[pid] = open_count.get(pid, 0) + 1
            if len(open_count) > 1:
                raise AssertionError(
                    f"blocks of processes {sorted(open_count)} executing "
                    f"concurrently at t={time} (opened by {key})"
                )


def write_outputs(report: SimReport, log: EventLog, out_dir: str | Path) -> list[Path]:
    """Write the tabular results, summary scalars, occupancy series, and
    event log to ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    results = out / "results.csv"
    with results.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["request", "arrival_us", "start_us", "completion_us", "turnaround_us"]
        )
        for row in report.requests:
            writer.writerow(
                [
                    row["request"],
                    row["arrival_us"],
                    row["start_us"],
                    row["completion_us"],
                    row["turnaround_us"],
                ]
            )
    written.append(results)

    summary = out / "summary.json"
    summary.write_text(json.dumps(report.scalars(), indent=2, sort_keys=True) + "\n")
    written.append(summary)

    occupancy = out / "occupancy.csv"
    with occupancy.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_us"] + list(RESOURCE_KINDS))
        for t, frac in report.occupancy_series:
            writer.writerow([t] + [frac[kind] for kind in RESOURCE_KINDS])
    written.append(occupancy)

    events = out / "events.jsonl"
    log.save(events)
    written.append(events)
    return written
