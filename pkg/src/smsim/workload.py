"""Task traces, request arrival generation, and trace synthesis.

A task (training or inference) is a sequence of kernel invocations that
launch strictly serially: invocation i+1 cannot reach the device before
invocation i has completed plus its launch gap. Inference tasks replay
their trace once per request; request arrivals follow either an open-loop
Poisson process or a closed single-stream loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .resources import (
    GpuConfig,
    KernelDescriptor,
    classify_kernel,
    max_resident_blocks_per_sm,
)


class TraceError(Exception):
    """Trace file failed to parse or violated a kernel invariant."""


@dataclass(frozen=True)
class TransferOp:
    direction: str  # "h2d" | "d2h"
    size: float  # KB
    position: str  # "before" | "after" the kernel

    def __post_init__(self):
        if self.direction not in ("h2d", "d2h"):
            raise ValueError(f"bad transfer direction {self.direction!r}")
        if self.position not in ("before", "after"):
            raise ValueError(f"bad transfer position {self.position!r}")
        if self.size <= 0:
            raise ValueError("transfer size must be > 0")


@dataclass(frozen=True)
class KernelInvocation:
    kernel: KernelDescriptor
    # Delay between this kernel's completion (incl. after-transfers) and the
    # next kernel reaching the device. None means "use the scenario default".
    gap_after: Optional[float] = None
    transfers: tuple[TransferOp, ...] = ()

    def __post_init__(self):
        if self.gap_after is not None and self.gap_after < 0:
            raise ValueError("gap_after must be >= 0")


@dataclass(frozen=True)
class TaskTrace:
    task_id: str
    kind: str  # "training" | "inference"
    invocations: tuple[KernelInvocation, ...]
    global_mem_alloc: float = 0.0  # MB

    def __post_init__(self):
        if self.kind not in ("training", "inference"):
            raise ValueError(f"task {self.task_id!r}: bad kind {self.kind!r}")
        if not self.invocations:
            raise ValueError(f"task {self.task_id!r}: empty invocation list")
        if self.global_mem_alloc < 0:
            raise ValueError(f"task {self.task_id!r}: negative global_mem_alloc")

    def validate_for(self, gpu: GpuConfig) -> None:
        if self.global_mem_alloc > gpu.global_mem:
            raise TraceError(
                f"task {self.task_id!r}: global_mem_alloc "
                f"{self.global_mem_alloc} MB exceeds device {gpu.global_mem} MB"
            )
        for inv in self.invocations:
            try:
                inv.kernel.validate_for(gpu)
            except ValueError as exc:
                raise TraceError(str(exc)) from exc


@dataclass(frozen=True)
class ArrivalPattern:
    mode: str  # "poisson" | "single-stream"
    num_requests: int = 1
    rate: float = 0.0  # requests/s, poisson only
    seed: Optional[int] = None  # None: caller supplies (scenario seed)

    def __post_init__(self):
        if self.mode not in ("poisson", "single-stream"):
            raise ValueError(f"bad arrival mode {self.mode!r}")
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        if self.mode == "poisson" and self.rate <= 0:
            raise ValueError("poisson arrivals need rate > 0")


def generate_arrivals(pattern: ArrivalPattern) -> list[Optional[float]]:
    """Request arrival timestamps in microseconds.

    Poisson mode draws exponential inter-arrival gaps of mean 1/rate from a
    seeded generator, so the output is deterministic. Single-stream mode is
    closed-loop: request 0 arrives at t=0 and every later slot is None, a
    placeholder the engine resolves to the previous request's completion.
    """
    if pattern.mode == "single-stream":
        return [0.0] + [None] * (pattern.num_requests - 1)
    rng = np.random.default_rng(pattern.seed if pattern.seed is not None else 0)
    mean_gap_us = 1e6 / pattern.rate
    gaps = rng.exponential(mean_gap_us, size=pattern.num_requests)
    return [float(t) for t in np.cumsum(gaps)]


# --- trace files -----------------------------------------------------------
#
# One JSON object per trace:
# {
#   "task_id": str, "kind": "training"|"inference", "global_mem_alloc_mb": num,
#   "invocations": [
#     {"name": str, "grid_blocks": int, "threads_per_block": int,
#      "regs_per_thread": int, "shared_mem_per_block_kb": num,
#      "isolated_duration_us": num, "gap_after_us": num (optional),
#      "transfers": [{"direction": "h2d"|"d2h", "size_kb": num,
#                     "position": "before"|"after"}]}
#   ]
# }

# Accepted spellings for transfer fields; stored canonically short.
_DIRECTION_ALIASES = {
    "h2d": "h2d",
    "host-to-device": "h2d",
    "d2h": "d2h",
    "device-to-host": "d2h",
}
_POSITION_ALIASES = {
    "before": "before",
    "before-kernel": "before",
    "after": "after",
    "after-kernel": "after",
}

_INVOCATION_KEYS = {
    "name",
    "grid_blocks",
    "threads_per_block",
    "regs_per_thread",
    "shared_mem_per_block_kb",
    "isolated_duration_us",
    "gap_after_us",
    "transfers",
}
_TRANSFER_KEYS = {"direction", "size_kb", "position"}
_TRACE_KEYS = {"task_id", "kind", "global_mem_alloc_mb", "invocations"}


def _parse_invocation(obj: dict, index: int) -> KernelInvocation:
    where = f"invocations[{index}]"
    if not isinstance(obj, dict):
        raise TraceError(f"{where}: expected an object")
    unknown = set(obj) - _INVOCATION_KEYS
    if unknown:
        raise TraceError(f"{where}: unknown fields {sorted(unknown)}")
    for key in ("name", "grid_blocks", "threads_per_block", "isolated_duration_us"):
        if key not in obj:
            raise TraceError(f"{where}: missing field {key!r}")
    transfers = []
    for t_index, t_obj in enumerate(obj.get("transfers", [])):
        t_where = f"{where}.transfers[{t_index}]"
        unknown = set(t_obj) - _TRANSFER_KEYS
        if unknown:
            raise TraceError(f"{t_where}: unknown fields {sorted(unknown)}")
        try:
            transfers.append(
                TransferOp(
                    direction=_DIRECTION_ALIASES.get(
                        t_obj["direction"], t_obj["direction"]
                    ),
                    size=float(t_obj["size_kb"]),
                    position=_POSITION_ALIASES.get(
                        t_obj["position"], t_obj["position"]
                    ),
                )
            )
        except (KeyError, ValueError) as exc:
            raise TraceError(f"{t_where}: {exc}") from exc
    try:
        kernel = KernelDescriptor(
            name=str(obj["name"]),
            grid_blocks=int(obj["grid_blocks"]),
            threads_per_block=int(obj["threads_per_block"]),
            regs_per_thread=int(obj.get("regs_per_thread", 0)),
            shared_mem_per_block=float(obj.get("shared_mem_per_block_kb", 0.0)),
            isolated_duration=float(obj["isolated_duration_us"]),
        )
        gap = obj.get("gap_after_us")
        return KernelInvocation(
            kernel=kernel,
            gap_after=None if gap is None else float(gap),
            transfers=tuple(transfers),
        )
    except ValueError as exc:
        raise TraceError(f"{where}: {exc}") from exc


def parse_trace(obj: dict) -> TaskTrace:
    """Build a TaskTrace from a decoded trace object, validating invariants."""
    if not isinstance(obj, dict):
        raise TraceError("trace root: expected an object")
    unknown = set(obj) - _TRACE_KEYS
    if unknown:
        raise TraceError(f"trace root: unknown fields {sorted(unknown)}")
    for key in ("task_id", "kind", "invocations"):
        if key not in obj:
            raise TraceError(f"trace root: missing field {key!r}")
    invocations = [
        _parse_invocation(inv, i) for i, inv in enumerate(obj["invocations"])
    ]
    try:
        return TaskTrace(
            task_id=str(obj["task_id"]),
            kind=str(obj["kind"]),
            invocations=tuple(invocations),
            global_mem_alloc=float(obj.get("global_mem_alloc_mb", 0.0)),
        )
    except ValueError as exc:
        raise TraceError(f"trace root: {exc}") from exc


def load_trace(path: str | Path) -> TaskTrace:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise TraceError(f"{path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return parse_trace(obj)
    except TraceError as exc:
        raise TraceError(f"{path}: {exc}") from exc


def trace_to_obj(trace: TaskTrace) -> dict:
    invocations = []
    for inv in trace.invocations:
        k = inv.kernel
        obj = {
            "name": k.name,
            "grid_blocks": k.grid_blocks,
            "threads_per_block": k.threads_per_block,
            "regs_per_thread": k.regs_per_thread,
            "shared_mem_per_block_kb": k.shared_mem_per_block,
            "isolated_duration_us": k.isolated_duration,
        }
        if inv.gap_after is not None:
            obj["gap_after_us"] = inv.gap_after
        if inv.transfers:
            obj["transfers"] = [
                {"direction": t.direction, "size_kb": t.size, "position": t.position}
                for t in inv.transfers
            ]
        invocations.append(obj)
    return {
        "task_id": trace.task_id,
        "kind": trace.kind,
        "global_mem_alloc_mb": trace.global_mem_alloc,
        "invocations": invocations,
    }


def emit_trace(trace: TaskTrace, path: str | Path) -> None:
    Path(path).write_text(json.dumps(trace_to_obj(trace), indent=2) + "\n")


# --- trace statistics ------------------------------------------------------


def trace_stats(trace: TaskTrace, gpu: GpuConfig) -> dict:
    """Aggregate classification statistics over a trace.

    pct_large_kernels is the share of kernels whose grid cannot be fully
    resident; pct_long_running_runtime is the share of total isolated
    runtime spent inside kernels longer than 1 ms.
    """
    total = len(trace.invocations)
    large = 0
    total_time = 0.0
    long_time = 0.0
    for inv in trace.invocations:
        cls = classify_kernel(inv.kernel, gpu)
        if cls["large"]:
            large += 1
        total_time += inv.kernel.isolated_duration
        if cls["long_running"]:
            long_time += inv.kernel.isolated_duration
    return {
        "total_kernels": total,
        "pct_large_kernels": 100.0 * large / total,
        "pct_long_running_runtime": 100.0 * long_time / total_time,
    }


# --- synthetic traces ------------------------------------------------------


@dataclass(frozen=True)
class SynthesisSpec:
    """Knobs for building a synthetic trace with target classification stats.

    frac_large is the target fraction of kernels that are large;
    frac_long_running_time the target fraction of runtime spent in
    long-running kernels. Block shapes are drawn from ``block_shapes``
    (threads_per_block, regs_per_thread, shared_mem_per_block_kb) and grid
    sizes are capped at ``max_grid_blocks``.
    """

    num_kernels: int
    frac_large: float = 0.0
    frac_long_running_time: float = 0.0
    seed: int = 0
    block_shapes: tuple[tuple[int, int, float], ...] = (
        (256, 32, 0.0),
        (128, 48, 0.0),
        (64, 80, 0.0),
    )
    min_grid_blocks: int = 1
    max_grid_blocks: int = 4096
    short_duration_us: float = 120.0  # log-normal median for short kernels
    long_duration_us: float = 5000.0  # base duration for long-running kernels
    task_id: str = "synthetic"
    kind: str = "training"
    gap_after_us: Optional[float] = None

    def __post_init__(self):
        if self.num_kernels < 1:
            raise ValueError("num_kernels must be >= 1")
        for name in ("frac_large", "frac_long_running_time"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 1 <= self.min_grid_blocks <= self.max_grid_blocks:
            raise ValueError("need 1 <= min_grid_blocks <= max_grid_blocks")


class InfeasibleSynthesisError(Exception):
    """The requested fractions cannot be met with the given distributions."""


def synthesize_trace(spec: SynthesisSpec, gpu: Optional[GpuConfig] = None) -> TaskTrace:
    """Build a deterministic trace whose measured stats match ``spec``.

    Counts are rounded to the nearest kernel, and long-kernel durations are
    solved so the long-running runtime share lands on the target exactly
    (before rounding noise from the short-kernel jitter).
    """
    gpu = gpu or GpuConfig()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_kernels
    n_large = round(spec.frac_large * n)

    # Device capacity per block shape decides which shapes can yield a
    # large kernel under the grid cap.
    shape_caps = []
    for threads, regs, smem in spec.block_shapes:
        probe = KernelDescriptor(
            name="probe",
            grid_blocks=1,
            threads_per_block=threads,
            regs_per_thread=regs,
            shared_mem_per_block=smem,
        )
        shape_caps.append(gpu.num_sms * max_resident_blocks_per_sm(probe, gpu))
    large_shapes = [
        i for i, cap in enumerate(shape_caps) if cap < spec.max_grid_blocks
    ]
    if n_large > 0 and not large_shapes:
        raise InfeasibleSynthesisError(
            f"frac_large={spec.frac_large} requested but max_grid_blocks="
            f"{spec.max_grid_blocks} cannot exceed device capacity "
            f"{min(shape_caps)} for any block shape"
        )

    # Short-kernel durations: log-normal around the configured median, all
    # strictly under the long-running threshold.
    durations = np.minimum(
        spec.short_duration_us * rng.lognormal(0.0, 0.35, size=n), 900.0
    )

    # Choose how many kernels are long-running and solve for their duration
    # so that long_time / total_time == frac_long_running_time.
    target = spec.frac_long_running_time
    long_each = 0.0
    if target == 0.0:
        n_long = 0
    elif target >= 1.0:
        n_long = n
        long_each = spec.long_duration_us
    else:
        n_long = min(max(1, round(n * target * 0.2)), n - 1)
        while n_long >= 1:
            short_total = float(np.sum(durations[n_long:]))
            long_each = target * short_total / ((1.0 - target) * n_long)
            if long_each > 1000.0:
                break
            n_long -= 1
        if n_long == 0:
            raise InfeasibleSynthesisError(
                f"frac_long_running_time={target} too small to give any "
                "kernel a duration above the 1 ms threshold"
            )
    long_indices = set(range(n_long))  # first n_long kernels are long-running

    large_indices = set(
        int(i) for i in rng.choice(n, size=n_large, replace=False)
    ) if n_large else set()

    invocations = []
    for i in range(n):
        if i in large_indices:
            shape_idx = large_shapes[int(rng.integers(0, len(large_shapes)))]
        else:
            shape_idx = int(rng.integers(0, len(spec.block_shapes)))
        threads, regs, smem = spec.block_shapes[shape_idx]
        cap = shape_caps[shape_idx]
        if i in large_indices:
            grid = int(rng.integers(cap + 1, spec.max_grid_blocks + 1))
        else:
            low = min(spec.min_grid_blocks, cap)
            grid = int(rng.integers(low, min(cap, spec.max_grid_blocks) + 1))
        duration = long_each if i in long_indices else float(durations[i])
        invocations.append(
            KernelInvocation(
                kernel=KernelDescriptor(
                    name=f"{spec.task_id}-k{i}",
                    grid_blocks=grid,
                    threads_per_block=threads,
                    regs_per_thread=regs,
                    shared_mem_per_block=smem,
                    isolated_duration=duration,
                ),
                gap_after=spec.gap_after_us,
            )
        )
    return TaskTrace(
        task_id=spec.task_id,
        kind=spec.kind,
        invocations=tuple(invocations),
    )
