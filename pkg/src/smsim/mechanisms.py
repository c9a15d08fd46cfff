"""The three concurrency mechanisms, expressed as dispatch constraints.

Priority streams order kernel selection by stream priority inside one
process; time-slicing rotates exclusive device access between processes in
fixed-length round-robin slices; MPS lets separate clients share the
device spatially under per-client thread caps with no notion of priority.
All three sit on top of the same block scheduler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

from .block_scheduler import BlockRun, DispatchConstraint, DispatchQueue, KernelRun
from .resources import GpuConfig, block_demand, max_resident_blocks_per_sm
from .workload import TaskTrace

PRIORITY_LEVELS = (-2, -1, 0)  # lower number = higher priority


class AdmissionError(Exception):
    """A process's resource footprint does not fit alongside the residents."""

    def __init__(self, resource: str, message: str):
        super().__init__(message)
        self.resource = resource


@dataclass(frozen=True)
class PriorityStreamsConfig:
    """All tasks share one process; each task's stream has a priority."""

    priorities: dict = field(default_factory=dict)  # task_id -> int in [-2, 0]
    queue_mode: str = "fifo"

    kind = "streams"

    def __post_init__(self):
        for task_id, prio in self.priorities.items():
            if prio not in PRIORITY_LEVELS:
                raise ValueError(
                    f"stream priority for {task_id!r} must be one of "
                    f"{PRIORITY_LEVELS}, got {prio}"
                )


@dataclass(frozen=True)
class TimeSlicingConfig:
    """Each task is its own process; the device alternates between them.

    None values fall back to the device config's slice parameters.
    """

    slice_length: Optional[float] = None  # us
    ctx_save_cost: Optional[float] = None
    ctx_restore_cost: Optional[float] = None

    kind = "timeslicing"

    def __post_init__(self):
        if self.slice_length is not None and self.slice_length <= 0:
            raise ValueError("slice_length must be > 0")
        for name in ("ctx_save_cost", "ctx_restore_cost"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be >= 0")

    def resolved(self, gpu: GpuConfig) -> tuple[float, float, float]:
        return (
            self.slice_length if self.slice_length is not None else gpu.slice_length,
            self.ctx_save_cost if self.ctx_save_cost is not None else gpu.ctx_save_cost,
            self.ctx_restore_cost
            if self.ctx_restore_cost is not None
            else gpu.ctx_restore_cost,
        )


@dataclass(frozen=True)
class MpsConfig:
    """Each task is a separate client of a shared scheduling server.

    thread_limit_pct caps the fraction of the device's total threads any
    one client's executing blocks may hold. With allow_cap_bypass (the
    default), a head kernel stalled at its client's cap lets later-arrived
    kernels from other clients dispatch into the remaining resources;
    disabling it keeps strict global head-of-line order even then.
    """

    thread_limit_pct: dict = field(default_factory=dict)  # task_id -> (0, 100]
    allow_cap_bypass: bool = True

    kind = "mps"

    def __post_init__(self):
        for task_id, pct in self.thread_limit_pct.items():
            if not 0 < pct <= 100:
                raise ValueError(
                    f"thread_limit_pct for {task_id!r} must be in (0, 100], got {pct}"
                )

    def cap_for(self, task_id: str) -> float:
        return self.thread_limit_pct.get(task_id, 100.0)


@dataclass(frozen=True)
class NoMechanismConfig:
    """Single context, plain leftover dispatch; used for baselines."""

    kind = "none"


MechanismConfig = (
    PriorityStreamsConfig | TimeSlicingConfig | MpsConfig | NoMechanismConfig
)


def recommended_thread_limit_pct(num_clients: int) -> float:
    """The vendor-recommended per-client cap, 100%/(0.5 n): oversubscribed
    so idle resources can still be colocated onto."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    return min(100.0, 100.0 / (0.5 * num_clients))


# --- time-slicing residency ------------------------------------------------


@dataclass
class ProcessContext:
    """Per-process resource footprint that stays resident on the device for
    the whole run, even while other processes' slices execute."""

    client_id: str
    global_mem: float = 0.0  # MB
    per_sm_registers: float = 0.0
    per_sm_shared: float = 0.0  # KB
    resident: bool = False

    def __post_init__(self):
        for name in ("global_mem", "per_sm_registers", "per_sm_shared"):
            if getattr(self, name) < 0:
                raise ValueError(f"footprint {name} must be >= 0")


def derive_footprint(trace: TaskTrace, gpu: GpuConfig) -> ProcessContext:
    """Worst-case per-SM register/shared usage across the trace's kernels,
    plus the trace's declared global memory allocation."""
    regs = 0.0
    shared = 0.0
    for inv in trace.invocations:
        resident = max_resident_blocks_per_sm(inv.kernel, gpu)
        demand = block_demand(inv.kernel)
        regs = max(regs, resident * demand.registers)
        shared = max(shared, resident * demand.shared_mem)
    return ProcessContext(
        client_id=trace.task_id,
        global_mem=trace.global_mem_alloc,
        per_sm_registers=regs,
        per_sm_shared=shared,
    )


def admit_process(
    process: ProcessContext, residents: list[ProcessContext], gpu: GpuConfig
) -> None:
    """Admit a process for time-sliced execution, or raise AdmissionError.

    Footprints of co-resident processes are never swapped out between
    slices, so their sums must fit the device even though the processes
    never execute simultaneously.
    """
    checks = (
        ("registers", "per_sm_registers", gpu.registers_per_sm),
        ("shared memory", "per_sm_shared", gpu.shared_mem_per_sm),
        ("global memory", "global_mem", gpu.global_mem),
    )
    for resource, attr, limit in checks:
        total = getattr(process, attr) + sum(getattr(r, attr) for r in residents)
        if total > limit:
            raise AdmissionError(
                resource,
                f"cannot admit process {process.client_id!r}: out of {resource} "
                f"({total:g} needed, {limit:g} available)",
            )
    process.resident = True


# --- dispatch constraints ---------------------------------------------------


class StreamsConstraint(DispatchConstraint):
    """Dispatch considers streams in ascending priority number; a stream is
    eligible only while every higher-priority stream owes no blocks. With a
    single priority level this degenerates to the plain leftover policy."""

    def __init__(self, queues: list[tuple[int, DispatchQueue]]):
        # (priority, queue) per task/stream
        self.queues = queues

    def candidates(self) -> Iterator[tuple[KernelRun, bool]]:
        for priority in sorted({p for p, _ in self.queues}):
            heads = []
            for prio, queue in self.queues:
                if prio != priority:
                    continue
                head = queue.head()
                if head is not None:
                    heads.append(head)
            if heads:
                heads.sort(key=lambda k: (k.arrival_time, k.task_index))
                yield heads[0], True
                return  # lower priorities blocked while this level owes blocks


class MpsConstraint(DispatchConstraint):
    """Global arrival-order dispatch across clients with head-of-line
    blocking; a client at its thread cap no longer blocks others."""

    def __init__(self, config: MpsConfig, gpu: GpuConfig):
        self.config = config
        self.gpu = gpu
        self.kernels: list[KernelRun] = []  # arrival order
        self.executing_threads: dict[str, int] = {}

    def cap_threads(self, task_id: str) -> float:
        return self.config.cap_for(task_id) / 100.0 * self.gpu.total_threads

    def register_kernel(self, kernel: KernelRun) -> None:
        self.kernels.append(kernel)
        self.kernels.sort(key=lambda k: (k.arrival_time, k.task_index))

    def _stalled(self, kernel: KernelRun) -> bool:
        used = self.executing_threads.get(kernel.task_id, 0)
        return used + kernel.demand.threads > self.cap_threads(kernel.task_id)

    def candidates(self) -> Iterator[tuple[KernelRun, bool]]:
        self.kernels = [k for k in self.kernels if not k.finished]
        for kernel in self.kernels:
            if kernel.undispatched == 0:
                continue
            if self.config.allow_cap_bypass:
                yield kernel, not self._stalled(kernel)
            else:
                yield kernel, True

    def admits(self, block: BlockRun) -> bool:
        used = self.executing_threads.get(block.kernel.task_id, 0)
        return used + block.demand.threads <= self.cap_threads(block.kernel.task_id)

    def on_dispatch(self, block: BlockRun) -> None:
        task_id = block.kernel.task_id
        self.executing_threads[task_id] = (
            self.executing_threads.get(task_id, 0) + block.demand.threads
        )

    def on_release(self, block: BlockRun) -> None:
        task_id = block.kernel.task_id
        self.executing_threads[task_id] -= block.demand.threads


class TimeSliceConstraint(DispatchConstraint):
    """Only the active process's kernels are dispatchable; the engine's
    rotation state decides who that is (None while switching)."""

    def __init__(self):
        self.queues_by_process: dict[int, list[DispatchQueue]] = {}
        self.active_process: Optional[int] = None

    def add_queue(self, process_id: int, queue: DispatchQueue) -> None:
        self.queues_by_process.setdefault(process_id, []).append(queue)

    def candidates(self) -> Iterator[tuple[KernelRun, bool]]:
        if self.active_process is None:
            return
        heads = []
        for queue in self.queues_by_process.get(self.active_process, []):
            head = queue.head()
            if head is not None:
                heads.append(head)
        if heads:
            heads.sort(key=lambda k: (k.arrival_time, k.task_index))
            yield heads[0], True
