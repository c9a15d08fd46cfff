"""Deterministic discrete-event simulation core.

The engine advances a single clock over a heap of pending events. At each
instant it drains every due event (completions before slice expiries
before arrivals, then by insertion order), then runs one dispatch pass
that places blocks under the active mechanism's constraints. Identical
scenarios produce byte-identical event logs.

Per-block execution time comes from a wave model: a kernel's isolated
duration is split evenly across the ceil(grid / device-capacity) waves its
grid needs, so replaying a kernel alone reproduces its isolated duration
exactly. An optional contention factor slows a block by
1 + alpha * (fraction of co-resident warps belonging to other tasks).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .block_scheduler import (
    CHECKPOINTED,
    DONE,
    EXECUTING,
    BlockRun,
    DispatchConstraint,
    DispatchQueue,
    KernelRun,
    SmState,
    dispatch_round,
    make_sms,
)
from .mechanisms import (
    MechanismConfig,
    MpsConfig,
    MpsConstraint,
    NoMechanismConfig,
    PriorityStreamsConfig,
    ProcessContext,
    StreamsConstraint,
    TimeSliceConstraint,
    TimeSlicingConfig,
    admit_process,
    derive_footprint,
)
from .preemption import (
    PreemptionConfig,
    PreemptionPlan,
    ReservationLedger,
    cost_per_sm,
    select_victims,
    select_victims_aggregate,
)
from .resources import (
    GpuConfig,
    KernelDescriptor,
    ResourceVector,
    block_demand,
    max_resident_blocks_per_sm,
)
from .workload import ArrivalPattern, TaskTrace, TransferOp, generate_arrivals

LATENCY_SENSITIVE = "latency-sensitive"
BEST_EFFORT = "best-effort"

# Intra-instant processing order: free resources first, then rotate, then
# admit new work; dispatch happens after the whole batch.
_EVENT_RANK = {
    "block-complete": 0,
    "transfer-end": 1,
    "preempt-save-done": 2,
    "preempt-restore-done": 3,
    "slice-expiry": 4,
    "request-arrival": 5,
    "kernel-arrival": 6,
    "_timer": 7,
}


class SimulationError(Exception):
    pass


class StarvationError(SimulationError):
    """The simulation stopped making progress before all tasks finished."""


class ReplayDivergenceError(SimulationError):
    def __init__(self, index: int, message: str):
        super().__init__(f"event {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class ScenarioTask:
    trace: TaskTrace
    role: str = BEST_EFFORT
    stream_priority: Optional[int] = None  # streams mechanism
    thread_limit_pct: Optional[float] = None  # mps mechanism
    footprint: Optional[ProcessContext] = None  # time-slicing residency

    def __post_init__(self):
        if self.role not in (LATENCY_SENSITIVE, BEST_EFFORT):
            raise ValueError(f"bad task role {self.role!r}")


@dataclass(frozen=True)
class Scenario:
    gpu: GpuConfig = field(default_factory=GpuConfig)
    mechanism: MechanismConfig = field(default_factory=NoMechanismConfig)
    tasks: tuple[ScenarioTask, ...] = ()
    arrivals: Optional[ArrivalPattern] = None
    contention_alpha: float = 0.0
    gap_default: float = 20.0  # us
    host_bandwidth: float = 16.0  # GB/s host link for transfers
    seed: int = 0
    preemption: PreemptionConfig = field(default_factory=PreemptionConfig)
    horizon: Optional[float] = None  # us; starvation guard
    max_events: int = 50_000_000
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("scenario needs at least one task")
        ls = [t for t in self.tasks if t.role == LATENCY_SENSITIVE]
        if len(ls) > 1:
            raise ValueError("at most one latency-sensitive task is supported")
        if ls and self.arrivals is None:
            raise ValueError("latency-sensitive task needs an arrival pattern")
        if self.contention_alpha < 0:
            raise ValueError("contention_alpha must be >= 0")
        if self.host_bandwidth <= 0:
            raise ValueError("host_bandwidth must be > 0")
        if self.gap_default < 0:
            raise ValueError("gap_default must be >= 0")
        if self.preemption.enabled and isinstance(self.mechanism, TimeSlicingConfig):
            raise ValueError(
                "fine-grained preemption composes with streams/mps, not "
                "time-slicing (which already preempts whole slices)"
            )
        ids = [t.trace.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")


class EventLog:
    """Append-only record of everything the simulation did, in processing
    order; serializable to line-delimited JSON."""

    def __init__(self, events: Optional[list[dict]] = None):
        self.events: list[dict] = events if events is not None else []

    def append(self, record: dict) -> None:
        self.events.append(record)

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        return isinstance(other, EventLog) and self.events == other.events

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> "EventLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "EventLog":
        return cls.from_jsonl(Path(path).read_text())


@dataclass
class RunResult:
    scenario: Scenario
    log: EventLog
    final_state: dict

    def report(self, baseline=None):
        from .metrics import summarize

        return summarize(self.log, self.scenario.gpu, baseline=baseline)


class _TaskRun:
    """Mutable per-task lifecycle: request queueing and the strictly
    sequential walk through the trace's invocations."""

    def __init__(
        self,
        index: int,
        sc_task: ScenarioTask,
        process_id: int,
        priority: int,
        num_requests: int,
        queue: DispatchQueue,
    ):
        self.index = index
        self.trace = sc_task.trace
        self.role = sc_task.role
        self.task_id = sc_task.trace.task_id
        self.process_id = process_id
        self.priority = priority
        self.num_requests = num_requests
        self.queue = queue
        self.request_arrivals: dict[int, float] = {}
        self.request_completions: dict[int, float] = {}
        self.waiting: list[int] = []
        self.active_request: Optional[int] = None
        self.active_inv = 0
        self.live_kernel: Optional[KernelRun] = None
        self.transfer_phase: Optional[str] = None
        self.transfer_pending: list[TransferOp] = []
        self.executing_blocks = 0  # dispatched, not yet completed/checkpointed
        self.last_completion: Optional[float] = None
        self.done = False
        self.done_logged = False

    def gap_after(self, inv_index: int, default: float) -> float:
        gap = self.trace.invocations[inv_index].gap_after
        return default if gap is None else gap

    def has_work(self) -> bool:
        """Ready work for slice rotation: blocks in flight or dispatchable."""
        if self.executing_blocks > 0:
            return True
        return self.live_kernel is not None and self.live_kernel.undispatched > 0


class _Channel:
    """One FIFO transfer lane per direction, shared by every process."""

    def __init__(self, direction: str):
        self.direction = direction
        self.busy = False
        self.waiting: list[tuple[TransferOp, "_TaskRun"]] = []
        self.current: Optional[tuple[TransferOp, "_TaskRun"]] = None


class _Rotation:
    """Round-robin exclusive-access state for time-slicing."""

    def __init__(self, process_ids, slice_length, save_cost, restore_cost):
        self.order = list(process_ids)
        self.slice_length = slice_length
        self.save_cost = save_cost
        self.restore_cost = restore_cost
        self.active: Optional[int] = None
        self.switching = False
        self.pending_victims: list[BlockRun] = []
        self.expiry_id = 0  # stale-expiry detection

    def next_ready(self, after: Optional[int], ready) -> Optional[int]:
        """First ready process after ``after`` in cyclic order, else None."""
        if not self.order:
            return None
        if after is None or after not in self.order:
            candidates = self.order
        else:
            start = self.order.index(after) + 1
            candidates = self.order[start:] + self.order[:start]
        for pid in candidates:
            if pid != after and ready(pid):
                return pid
        return None


class _Engine:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.gpu = scenario.gpu
        self.alpha = scenario.contention_alpha
        self.sms = make_sms(self.gpu)
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.log = EventLog()
        self.ledger = ReservationLedger()
        self.kernels: dict[str, KernelRun] = {}
        self.channels = {"h2d": _Channel("h2d"), "d2h": _Channel("d2h")}
        self.processed_events = 0

        mech = scenario.mechanism
        same_process = isinstance(mech, (PriorityStreamsConfig, NoMechanismConfig))
        self.tasks: list[_TaskRun] = []
        self.tasks_by_id: dict[str, _TaskRun] = {}
        for i, sc_task in enumerate(scenario.tasks):
            if isinstance(mech, PriorityStreamsConfig):
                if sc_task.trace.task_id in mech.priorities:
                    priority = mech.priorities[sc_task.trace.task_id]
                elif sc_task.stream_priority is not None:
                    priority = sc_task.stream_priority
                else:
                    priority = -2 if sc_task.role == LATENCY_SENSITIVE else 0
            else:
                priority = 0
            num_requests = 1
            if sc_task.role == LATENCY_SENSITIVE and scenario.arrivals:
                num_requests = scenario.arrivals.num_requests
            task = _TaskRun(
                index=i,
                sc_task=sc_task,
                process_id=0 if same_process else i,
                priority=priority,
                num_requests=num_requests,
                queue=DispatchQueue(getattr(mech, "queue_mode", "fifo")),
            )
            self.tasks.append(task)
            self.tasks_by_id[task.task_id] = task
        self.protected = {t.task_id for t in self.tasks if t.role == LATENCY_SENSITIVE}

        self.rotation: Optional[_Rotation] = None
        if isinstance(mech, TimeSlicingConfig):
            slice_len, save, restore = mech.resolved(self.gpu)
            self.rotation = _Rotation(
                [t.process_id for t in self.tasks], slice_len, save, restore
            )
            constraint = TimeSliceConstraint()
            for task in self.tasks:
                constraint.add_queue(task.process_id, task.queue)
            self.constraint: DispatchConstraint = constraint
        elif isinstance(mech, MpsConfig):
            caps = dict(mech.thread_limit_pct)
            for sc_task in scenario.tasks:
                if sc_task.thread_limit_pct is not None:
                    caps.setdefault(sc_task.trace.task_id, sc_task.thread_limit_pct)
            self.constraint = MpsConstraint(
                replace(mech, thread_limit_pct=caps), self.gpu
            )
        else:
            self.constraint = StreamsConstraint(
                [(t.priority, t.queue) for t in self.tasks]
            )
        self.constraint.ledger = self.ledger

        window = scenario.preemption.leave_space_window
        self.leave_space_window = scenario.gap_default if window is None else window

    # --- plumbing -----------------------------------------------------------

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def _push(self, time: float, kind: str, **payload) -> None:
        heapq.heappush(
            self.heap, (time, _EVENT_RANK[kind], self._next_seq(), kind, payload)
        )

    def _emit(self, kind: str, payload: dict) -> dict:
        record = {"seq": self._next_seq(), "time_us": self.now, "kind": kind}
        record.update(payload)
        self.log.append(record)
        return record

    def _emit_task_complete_if_due(self, task: _TaskRun) -> None:
        if task.done and not task.done_logged:
            task.done_logged = True
            self._emit("task-complete", {"task": task.task_id, "role": task.role})

    # --- setup --------------------------------------------------------------

    def _admit_all(self) -> None:
        if not isinstance(self.sc.mechanism, TimeSlicingConfig):
            return
        residents: list[ProcessContext] = []
        for sc_task in self.sc.tasks:
            ctx = sc_task.footprint or derive_footprint(sc_task.trace, self.gpu)
            admit_process(ctx, residents, self.gpu)
            residents.append(ctx)

    def _setup(self) -> None:
        self._admit_all()
        for task in self.tasks:
            task.trace.validate_for(self.gpu)
            if task.role == LATENCY_SENSITIVE:
                pattern = self.sc.arrivals
                if pattern.seed is None:
                    pattern = replace(pattern, seed=self.sc.seed)
                for req, t in enumerate(generate_arrivals(pattern)):
                    if t is not None:
                        self._push(t, "request-arrival", task=task, request=req)
            else:
                self._push(0.0, "request-arrival", task=task, request=0)

    # --- main loop ------------------------------------------------------------

    def run(self) -> RunResult:
        self._setup()
        while self.heap:
            t = self.heap[0][0]
            if self.sc.horizon is not None and t > self.sc.horizon:
                raise StarvationError(
                    f"no progress: next event at {t:.1f} us exceeds horizon "
                    f"{self.sc.horizon:.1f} us with unfinished tasks"
                )
            self.now = t
            while self.heap and self.heap[0][0] == t:
                _, _, _, kind, payload = heapq.heappop(self.heap)
                self.processed_events += 1
                if self.processed_events > self.sc.max_events:
                    raise StarvationError(
                        f"event budget {self.sc.max_events} exhausted at "
                        f"t={t:.1f} us; simulation is not converging"
                    )
                self._handle(kind, payload)
            if self.rotation is not None:
                self._maybe_rotate()
            self._dispatch_pass()
        unfinished = [task.task_id for task in self.tasks if not task.done]
        if unfinished:
            raise StarvationError(
                f"event queue drained with unfinished tasks: {unfinished}"
            )
        return RunResult(self.sc, self.log, self._final_state())

    def _handle(self, kind: str, p: dict) -> None:
        if kind == "block-complete":
            self._on_block_complete(p)
        elif kind == "transfer-end":
            self._on_transfer_end(p)
        elif kind == "preempt-save-done":
            self._on_save_done(p)
        elif kind == "preempt-restore-done":
            self._on_restore_done(p)
        elif kind == "slice-expiry":
            self._on_slice_expiry(p)
        elif kind == "request-arrival":
            self._on_request_arrival(p)
        elif kind == "kernel-arrival":
            self._on_kernel_arrival(p)
        elif kind == "_timer":
            self._on_timer(p)
        else:  # pragma: no cover
            raise AssertionError(f"unknown event kind {kind}")

    def _final_state(self) -> dict:
        # The clock may drain past the last observable event (stale timers);
        # final time is when the last logged thing happened.
        last_time = self.log.events[-1]["time_us"] if self.log.events else 0.0
        return {
            "time_us": last_time,
            "tasks": {
                task.task_id: {
                    "requests_completed": len(task.request_completions),
                    "done": task.done,
                }
                for task in self.tasks
            },
            "resident_blocks": [sorted(b.key for b in sm.resident) for sm in self.sms],
        }

    # --- request / invocation lifecycle ---------------------------------------

    def _on_request_arrival(self, p: dict) -> None:
        task: _TaskRun = p["task"]
        req: int = p["request"]
        task.request_arrivals[req] = self.now
        self._emit(
            "request-arrival",
            {"task": task.task_id, "role": task.role, "request": req},
        )
        if task.active_request is None:
            self._start_request(task, req)
        else:
            task.waiting.append(req)

    def _start_request(self, task: _TaskRun, req: int) -> None:
        task.active_request = req
        task.active_inv = 0
        # A request starting back-to-back with its predecessor's completion
        # still pays the host-side launch window before its first kernel
        # reaches the device; the trace's final gap_after sets its length.
        if task.last_completion == self.now:
            launch_gap = task.gap_after(
                len(task.trace.invocations) - 1, self.sc.gap_default
            )
            if launch_gap > 0:
                self._push(
                    self.now + launch_gap, "_timer", fn="invocation-start", task=task
                )
                return
        self._start_invocation(task)

    def _start_invocation(self, task: _TaskRun) -> None:
        """Queue up the next invocation's work; pushes events, never logs."""
        inv = task.trace.invocations[task.active_inv]
        before = [op for op in inv.transfers if op.position == "before"]
        if before:
            task.transfer_phase = "before"
            task.transfer_pending = list(before)
            self._push(self.now, "_timer", fn="issue-transfer", task=task)
        else:
            self._push(self.now, "kernel-arrival", task=task)

    def _on_kernel_arrival(self, p: dict) -> None:
        task: _TaskRun = p["task"]
        inv = task.trace.invocations[task.active_inv]
        desc = inv.kernel
        resident = max_resident_blocks_per_sm(desc, self.gpu)
        capacity = self.gpu.num_sms * resident
        waves = -(-desc.grid_blocks // capacity)
        kernel = KernelRun(
            key=f"{task.task_id}/r{task.active_request}/k{task.active_inv}",
            descriptor=desc,
            arrival_time=self.now,
            per_block_duration=desc.isolated_duration / waves,
            task_id=task.task_id,
            process_id=task.process_id,
            priority=task.priority,
            task_index=task.index,
        )
        self.kernels[kernel.key] = kernel
        task.live_kernel = kernel
        task.queue.add(kernel)
        if isinstance(self.constraint, MpsConstraint):
            self.constraint.register_kernel(kernel)
        self._emit(
            "kernel-arrival",
            {
                "task": task.task_id,
                "request": task.active_request,
                "invocation": task.active_inv,
                "kernel": kernel.key,
                "name": desc.name,
                "grid_blocks": desc.grid_blocks,
                "waves": waves,
                "per_block_duration_us": kernel.per_block_duration,
                "demand": kernel.demand.as_dict(),
            },
        )
        self._preempt_on_kernel_arrival(kernel, task)

    def _on_kernel_finished(self, task: _TaskRun) -> dict:
        """All blocks of the live kernel completed. Bookkeeping + pushes only."""
        task.live_kernel = None
        inv = task.trace.invocations[task.active_inv]
        after = [op for op in inv.transfers if op.position == "after"]
        if after:
            task.transfer_phase = "after"
            task.transfer_pending = list(after)
            self._push(self.now, "_timer", fn="issue-transfer", task=task)
            return {}
        return self._finish_invocation(task)

    def _finish_invocation(self, task: _TaskRun) -> dict:
        last = task.active_inv == len(task.trace.invocations) - 1
        if not last:
            gap = task.gap_after(task.active_inv, self.sc.gap_default)
            task.active_inv += 1
            self._push(self.now + gap, "_timer", fn="invocation-start", task=task)
            return {}
        req = task.active_request
        task.request_completions[req] = self.now
        task.last_completion = self.now
        task.active_request = None
        extras = {"completes_request": req, "request_task": task.task_id}
        if (
            task.role == LATENCY_SENSITIVE
            and self.sc.arrivals
            and self.sc.arrivals.mode == "single-stream"
            and req + 1 < task.num_requests
        ):
            self._push(self.now, "request-arrival", task=task, request=req + 1)
        if task.waiting:
            self._start_request(task, task.waiting.pop(0))
        if len(task.request_completions) == task.num_requests:
            task.done = True
        return extras

    def _on_timer(self, p: dict) -> None:
        fn = p["fn"]
        if fn == "invocation-start":
            self._start_invocation(p["task"])
        elif fn == "issue-transfer":
            self._issue_next_transfer(p["task"])
        elif fn == "pre-drain":
            self._preempt_pre_drain_fire(p)
        elif fn == "reservation-sweep":
            self.ledger.drop_expired(self.now)
        else:  # pragma: no cover
            raise AssertionError(f"unknown timer {fn}")

    # --- transfers -------------------------------------------------------------

    def _transfer_duration(self, op: TransferOp) -> float:
        # host link: 1 GB/s moves 1 KB per microsecond (decimal units)
        return op.size / self.sc.host_bandwidth

    def _issue_next_transfer(self, task: _TaskRun) -> None:
        op = task.transfer_pending.pop(0)
        channel = self.channels[op.direction]
        if channel.busy:
            channel.waiting.append((op, task))
        else:
            self._begin_transfer(channel, op, task)

    def _begin_transfer(self, channel: _Channel, op: TransferOp, task: _TaskRun) -> None:
        channel.busy = True
        channel.current = (op, task)
        duration = self._transfer_duration(op)
        self._emit(
            "transfer-start",
            {
                "task": task.task_id,
                "request": task.active_request,
                "invocation": task.active_inv,
                "direction": op.direction,
                "size_kb": op.size,
                "duration_us": duration,
                "position": op.position,
            },
        )
        self._push(self.now + duration, "transfer-end", channel=channel)
        if op.position == "before" and op.direction == "h2d":
            self._preempt_on_transfer_start(task, duration)

    def _on_transfer_end(self, p: dict) -> None:
        channel: _Channel = p["channel"]
        op, task = channel.current
        channel.current = None
        channel.busy = False
        extras: dict = {}
        continue_task = bool(task.transfer_pending)
        if not continue_task:
            phase, task.transfer_phase = task.transfer_phase, None
            if phase == "before":
                self._push(self.now, "kernel-arrival", task=task)
            elif phase == "after":
                extras = self._finish_invocation(task)
        self._emit(
            "transfer-end",
            {
                "task": task.task_id,
                "direction": op.direction,
                "size_kb": op.size,
                **extras,
            },
        )
        self._emit_task_complete_if_due(task)
        if channel.waiting:
            next_op, next_task = channel.waiting.pop(0)
            self._begin_transfer(channel, next_op, next_task)
        if continue_task:
            self._issue_next_transfer(task)

    # --- block execution ---------------------------------------------------------

    def _warps(self, block: BlockRun) -> int:
        return -(-int(block.demand.threads) // 32)

    def _progressing(self, block: BlockRun) -> bool:
        return (
            block.state == EXECUTING
            and block.frozen_at is None
            and block.exec_start is not None
            and block.exec_start <= self.now
        )

    def _rate_for(self, block: BlockRun, sm: SmState) -> float:
        if self.alpha == 0.0:
            return 1.0
        total = 0
        own = 0
        for other in sm.resident:
            if not self._progressing(other):
                continue
            w = self._warps(other)
            total += w
            if other.kernel.task_id == block.kernel.task_id:
                own += w
        if total == 0:
            return 1.0
        foreign = (total - own) / total
        return 1.0 / (1.0 + self.alpha * foreign)

    def _schedule_completion(self, block: BlockRun) -> None:
        sm = self.sms[block.sm_id]
        block.rate = self._rate_for(block, sm)
        block.last_settle = self.now
        block.completion_version += 1
        eta = self.now + block.remaining_work / block.rate
        self._push(eta, "block-complete", block=block, version=block.completion_version)

    def _settle_block(self, block: BlockRun) -> None:
        """Bank progress made since the last settle point."""
        if not self._progressing(block) or block.last_settle is None:
            return
        elapsed = self.now - block.last_settle
        if elapsed > 0:
            block.remaining_work = max(0.0, block.remaining_work - elapsed * block.rate)
            block.last_settle = self.now

    def _resettle_sm(self, sm: SmState) -> None:
        """Contention rates changed on this SM: rebank progress and reproject
        completions. Only needed when alpha > 0 (rates are 1 otherwise)."""
        if self.alpha == 0.0:
            return
        for block in sm.resident:
            if not self._progressing(block):
                continue
            self._settle_block(block)
            self._schedule_completion(block)

    def _freeze_block(self, block: BlockRun) -> None:
        """Stop a block's progress pending checkpoint; cancels its completion."""
        self._settle_block(block)
        block.frozen_at = self.now
        block.completion_version += 1  # invalidate in-flight completion event

    def _checkpoint_block(self, block: BlockRun, restore_cost: float) -> dict:
        """Save done: the block releases its SM and becomes resumable."""
        sm = self.sms[block.sm_id]
        sm.release(block)
        self.constraint.on_release(block)
        task = self.tasks_by_id[block.kernel.task_id]
        task.executing_blocks -= 1
        info = {
            "block": block.key,
            "task": block.kernel.task_id,
            "sm_id": block.sm_id,
            "demand": block.demand.as_dict(),
            "remaining_us": block.remaining_work,
            "frozen_at_us": block.frozen_at,
        }
        block.state = CHECKPOINTED
        block.sm_id = None
        block.frozen_at = None
        block.exec_start = None
        block.preempt_count += 1
        block.restore_cost = restore_cost
        block.kernel.return_checkpointed(block)
        task.queue.add(block.kernel)
        self._resettle_sm(sm)
        return info

    def _on_block_complete(self, p: dict) -> None:
        block: BlockRun = p["block"]
        if (
            p["version"] != block.completion_version
            or block.state != EXECUTING
            or block.frozen_at is not None
        ):
            return  # stale completion from before a freeze/resettle
        sm = self.sms[block.sm_id]
        block.remaining_work = 0.0
        block.state = DONE
        sm.release(block)
        self.constraint.on_release(block)
        kernel = block.kernel
        kernel.completed_blocks += 1
        task = self.tasks_by_id[kernel.task_id]
        task.executing_blocks -= 1
        extras: dict = {}
        if kernel.finished and task.live_kernel is kernel:
            extras = self._on_kernel_finished(task)
        self._emit(
            "block-complete",
            {
                "task": kernel.task_id,
                "kernel": kernel.key,
                "block_index": block.block_index,
                "sm_id": sm.sm_id,
                "demand": block.demand.as_dict(),
                **extras,
            },
        )
        self._emit_task_complete_if_due(task)
        self._preempt_on_block_complete(block, task)
        self._resettle_sm(sm)

    # --- dispatch ------------------------------------------------------------------

    def _dispatch_pass(self) -> None:
        self.ledger.drop_expired(self.now)
        self.constraint.now = self.now
        dispatch_round(self.constraint, self.sms, on_place=self._on_place)
        self._release_satisfied_reservations()

    def _on_place(self, block: BlockRun, sm_id: int, bypassed: list) -> None:
        kernel = block.kernel
        task = self.tasks_by_id[kernel.task_id]
        task.executing_blocks += 1
        exec_start = self.now + block.restore_cost
        block.exec_start = exec_start
        block.frozen_at = None
        payload = {
            "task": kernel.task_id,
            "kernel": kernel.key,
            "block_index": block.block_index,
            "sm_id": sm_id,
            "demand": block.demand.as_dict(),
            "exec_start_us": exec_start,
            "resumed": block.preempt_count > 0,
        }
        if bypassed:
            payload["bypassed"] = [
                {"kernel": k.key, "reason": reason} for k, reason in bypassed
            ]
        self._emit("block-dispatch", payload)
        self.ledger.consume(kernel.key, sm_id, block.demand)
        if block.restore_cost > 0:
            self._push(
                exec_start,
                "preempt-restore-done",
                block=block,
                version=block.completion_version,
            )
            block.restore_cost = 0.0
        else:
            self._schedule_completion(block)
        if kernel.undispatched == 0:
            self._preempt_on_kernel_fully_dispatched(kernel, task)
        self._resettle_sm(self.sms[sm_id])

    def _on_restore_done(self, p: dict) -> None:
        if p.get("rotation"):
            self._emit(
                "preempt-restore-done", {"process": p["to"], "rotation": True}
            )
            self._finish_switch(p["to"])
            return
        block: BlockRun = p["block"]
        if (
            block.state != EXECUTING
            or block.frozen_at is not None
            or p["version"] != block.completion_version
        ):
            return  # re-preempted mid-restore
        self._emit(
            "preempt-restore-done",
            {"block": block.key, "task": block.kernel.task_id, "sm_id": block.sm_id},
        )
        self._schedule_completion(block)
        self._resettle_sm(self.sms[block.sm_id])

    # --- time-slice rotation -----------------------------------------------------

    def _proc_ready(self, pid: int) -> bool:
        return any(t.process_id == pid and t.has_work() for t in self.tasks)

    def _maybe_rotate(self) -> None:
        rot = self.rotation
        if rot.switching:
            return
        if rot.active is None:
            nxt = rot.next_ready(None, self._proc_ready)
            if nxt is not None:
                self._begin_switch(nxt, reason="activate")
            return
        if not self._proc_ready(rot.active):
            nxt = rot.next_ready(rot.active, self._proc_ready)
            if nxt is not None:
                self._begin_switch(nxt, reason="forfeit")
            else:
                rot.active = None  # nothing ready anywhere: release the device
                rot.expiry_id += 1
                self.constraint.active_process = None

    def _on_slice_expiry(self, p: dict) -> None:
        rot = self.rotation
        if rot is None or rot.switching or p["expiry_id"] != rot.expiry_id:
            return
        nxt = rot.next_ready(rot.active, self._proc_ready)
        if nxt is None:
            if rot.active is not None and self._proc_ready(rot.active):
                rot.expiry_id += 1
                self._push(
                    self.now + rot.slice_length,
                    "slice-expiry",
                    expiry_id=rot.expiry_id,
                )
            else:
                rot.active = None
                rot.expiry_id += 1
                self.constraint.active_process = None
            return
        self._begin_switch(nxt, reason="slice-expiry")

    def _begin_switch(self, to: int, reason: str) -> None:
        rot = self.rotation
        outgoing = rot.active
        rot.switching = True
        rot.active = None
        rot.expiry_id += 1
        self.constraint.active_process = None
        victims = []
        if outgoing is not None:
            for sm in self.sms:
                for block in sm.resident:
                    if (
                        block.kernel.process_id == outgoing
                        and block.state == EXECUTING
                        and block.frozen_at is None
                    ):
                        victims.append(block)
            self._emit(
                "slice-expiry",
                {"from_process": outgoing, "to_process": to, "reason": reason},
            )
        if victims:
            victims.sort(key=lambda b: (b.kernel.task_index, b.block_index))
            for block in victims:
                self._freeze_block(block)
            rot.pending_victims = victims
            self._push(
                self.now + rot.save_cost, "preempt-save-done", rotation=True, to=to
            )
        else:
            self._complete_rotation_save(to)

    def _complete_rotation_save(self, to: int) -> None:
        rot = self.rotation
        has_checkpointed = any(
            task.process_id == to
            and task.live_kernel is not None
            and task.live_kernel.resumable
            for task in self.tasks
        )
        if has_checkpointed and rot.restore_cost > 0:
            self._push(
                self.now + rot.restore_cost,
                "preempt-restore-done",
                rotation=True,
                to=to,
            )
        else:
            self._finish_switch(to)

    def _finish_switch(self, to: int) -> None:
        rot = self.rotation
        rot.switching = False
        rot.active = to
        self.constraint.active_process = to
        rot.expiry_id += 1
        self._push(self.now + rot.slice_length, "slice-expiry", expiry_id=rot.expiry_id)

    def _on_save_done(self, p: dict) -> None:
        if p.get("rotation"):
            rot = self.rotation
            victims = [
                b
                for b in rot.pending_victims
                if b.state == EXECUTING and b.frozen_at is not None
            ]
            rot.pending_victims = []
            infos = [self._checkpoint_block(b, restore_cost=0.0) for b in victims]
            self._emit(
                "preempt-save-done",
                {"rotation": True, "save_cost_us": rot.save_cost, "victims": infos},
            )
            self._complete_rotation_save(p["to"])
            return
        plan: PreemptionPlan = p["plan"]
        victims = [
            b
            for b in plan.victims
            if b.state == EXECUTING and b.frozen_at == p["frozen_at"]
        ]
        infos = [
            self._checkpoint_block(b, restore_cost=plan.save_latency) for b in victims
        ]
        self._emit(
            "preempt-save-done",
            {
                "trigger": plan.trigger,
                "save_latency_us": plan.save_latency,
                "beneficiary": p["beneficiary"],
                "victims": infos,
            },
        )

    # --- fine-grained preemption triggers -------------------------------------------

    def _preempt_enabled_for(self, task: _TaskRun) -> bool:
        return self.sc.preemption.enabled and task.role == LATENCY_SENSITIVE

    def _reserved_fn_for(self, key: str):
        if not self.ledger:
            return None
        now = self.now
        return lambda sm: self.ledger.reserved_against(sm, key, now)

    def _target_blocks(self, descriptor: KernelDescriptor, wanted: int) -> int:
        resident = max_resident_blocks_per_sm(descriptor, self.gpu)
        return min(wanted, self.gpu.num_sms * resident)

    def _enact_plan(
        self,
        plan: PreemptionPlan,
        beneficiary_key: str,
        reservations: dict[int, ResourceVector],
        expires_at: float,
    ) -> None:
        for sm_id in sorted(reservations):
            self.ledger.reserve(
                beneficiary_key, sm_id, reservations[sm_id], expires_at
            )
        if reservations:
            self._push(expires_at, "_timer", fn="reservation-sweep")
        if plan.victims:
            for block in plan.victims:
                self._freeze_block(block)
            self._push(
                self.now + plan.save_latency,
                "preempt-save-done",
                plan=plan,
                beneficiary=beneficiary_key,
                frozen_at=self.now,
            )

    def _apportion(
        self,
        need: ResourceVector,
        target: int,
        freed: dict[int, ResourceVector],
        beneficiary_key: str,
    ) -> dict[int, ResourceVector]:
        """Split a target block count into per-SM reservations covering it,
        drawing on current effective free space plus the plan's freed space."""
        result: dict[int, ResourceVector] = {}
        remaining = target
        for sm in self.sms:
            if remaining <= 0:
                break
            avail = sm.free + freed.get(sm.sm_id, ResourceVector())
            avail = (
                avail - self.ledger.reserved_against(sm, beneficiary_key, self.now)
            ).clamped_floor()
            count = None
            for kind in ("threads", "blocks", "registers", "shared_mem"):
                demand = need.get(kind)
                if demand > 0:
                    fit = math.floor(avail.get(kind) / demand + 1e-9)
                    count = fit if count is None else min(count, fit)
            count = min(remaining, count or 0)
            if count > 0:
                result[sm.sm_id] = need.scaled(count)
                remaining -= count
        return result

    def _preempt_on_kernel_arrival(self, kernel: KernelRun, task: _TaskRun) -> None:
        cfg = self.sc.preemption
        if not cfg.enabled:
            return
        if cfg.min_reservation.get(task.task_id) is not None:
            self._preempt_reservation_floor(kernel, task)
        if not self._preempt_enabled_for(task) or not cfg.wants("on-arrival"):
            return
        target = self._target_blocks(kernel.descriptor, kernel.undispatched)
        plan = select_victims(
            kernel.demand,
            target,
            self.sms,
            self.protected,
            cfg.cost_model,
            self.gpu,
            now=self.now,
            trigger="on-arrival",
            reserved_fn=self._reserved_fn_for(kernel.key),
        )
        if plan is not None and plan.victims:
            expiry = self.now + plan.save_latency + self.leave_space_window
            self._enact_plan(plan, kernel.key, plan.freed_per_sm, expiry)

    def _preempt_reservation_floor(self, kernel: KernelRun, task: _TaskRun) -> None:
        cfg = self.sc.preemption
        floor = cfg.min_reservation[task.task_id]
        used = ResourceVector()
        for sm in self.sms:
            for block in sm.resident:
                if block.kernel.task_id == task.task_id:
                    used = used + block.demand
        missing = (floor - used).clamped_floor()
        if missing == ResourceVector():
            return
        plan = select_victims_aggregate(
            missing,
            self.sms,
            self.protected | {task.task_id},
            cfg.cost_model,
            self.gpu,
            now=self.now,
            trigger="on-arrival",
        )
        if plan is not None and plan.victims:
            expiry = self.now + plan.save_latency + self.leave_space_window
            self._enact_plan(plan, kernel.key, plan.freed_per_sm, expiry)

    def _preempt_on_kernel_fully_dispatched(
        self, kernel: KernelRun, task: _TaskRun
    ) -> None:
        cfg = self.sc.preemption
        if not self._preempt_enabled_for(task) or not cfg.wants("pre-drain"):
            return
        if task.live_kernel is not kernel:
            return
        if task.active_inv + 1 >= len(task.trace.invocations):
            return
        eta = self.now
        for block in kernel.live_blocks.values():
            if block.state == EXECUTING and block.frozen_at is None:
                basis = block.last_settle if block.last_settle is not None else block.exec_start
                eta = max(eta, max(basis, self.now) + block.remaining_work / block.rate)
        est_latency = cost_per_sm(cfg.cost_model, self.gpu, self.gpu.num_sms)
        fire_at = max(self.now, eta - est_latency)
        self._push(
            fire_at,
            "_timer",
            fn="pre-drain",
            task=task,
            request=task.active_request,
            invocation=task.active_inv,
            completion_eta=eta,
        )

    def _preempt_pre_drain_fire(self, p: dict) -> None:
        task: _TaskRun = p["task"]
        cfg = self.sc.preemption
        if task.active_request != p["request"] or task.active_inv != p["invocation"]:
            return  # the kernel sequence moved on; stale timer
        next_desc = task.trace.invocations[task.active_inv + 1].kernel
        key = f"{task.task_id}/r{task.active_request}/k{task.active_inv + 1}"
        if key in self.kernels:
            return
        need = block_demand(next_desc)
        target = self._target_blocks(next_desc, next_desc.grid_blocks)
        plan = select_victims(
            need,
            target,
            self.sms,
            self.protected,
            cfg.cost_model,
            self.gpu,
            now=self.now,
            trigger="pre-drain",
            reserved_fn=self._reserved_fn_for(key),
        )
        if plan is None:
            return
        gap = task.gap_after(task.active_inv, self.sc.gap_default)
        expected_arrival = p["completion_eta"] + gap
        expiry = expected_arrival + self.leave_space_window
        reservations = self._apportion(need, target, plan.freed_per_sm, key)
        self._enact_plan(plan, key, reservations, expiry)

    def _preempt_on_transfer_start(self, task: _TaskRun, duration: float) -> None:
        cfg = self.sc.preemption
        if not self._preempt_enabled_for(task) or not cfg.wants("transfer-overlap"):
            return
        key = f"{task.task_id}/r{task.active_request}/k{task.active_inv}"
        if key in self.kernels:
            return
        desc = task.trace.invocations[task.active_inv].kernel
        need = block_demand(desc)
        target = self._target_blocks(desc, desc.grid_blocks)
        plan = select_victims(
            need,
            target,
            self.sms,
            self.protected,
            cfg.cost_model,
            self.gpu,
            now=self.now,
            trigger="transfer-overlap",
            reserved_fn=self._reserved_fn_for(key),
        )
        if plan is None:
            return
        expiry = self.now + duration + self.leave_space_window
        reservations = self._apportion(need, target, plan.freed_per_sm, key)
        self._enact_plan(plan, key, reservations, expiry)

    def _preempt_on_block_complete(self, block: BlockRun, task: _TaskRun) -> None:
        cfg = self.sc.preemption
        if not self._preempt_enabled_for(task) or not cfg.wants("leave-space"):
            return
        prefix, inv_str = block.kernel.key.rsplit("k", 1)
        inv_index = int(inv_str)
        if inv_index + 1 >= len(task.trace.invocations):
            return
        gap = task.gap_after(inv_index, self.sc.gap_default)
        if gap > self.leave_space_window:
            return
        key = f"{prefix}k{inv_index + 1}"
        expiry = self.now + gap + self.leave_space_window
        self.ledger.reserve(key, block.sm_id, block.demand, expiry)
        self._push(expiry, "_timer", fn="reservation-sweep")

    def _release_satisfied_reservations(self) -> None:
        if not self.ledger:
            return
        done_keys = set()
        for entry in self.ledger.entries:
            kernel = self.kernels.get(entry.beneficiary_key)
            if kernel is not None and kernel.undispatched == 0:
                done_keys.add(entry.beneficiary_key)
        for key in done_keys:
            self.ledger.release_for(key)


def run(scenario: Scenario) -> RunResult:
    """Simulate a scenario to completion. Deterministic: equal scenarios
    yield byte-identical event logs."""
    return _Engine(scenario).run()


def run_baseline(scenario: Scenario, task_id: str) -> RunResult:
    """Run one of the scenario's tasks alone (no concurrency mechanism),
    as the denominator for degradation ratios."""
    for sc_task in scenario.tasks:
        if sc_task.trace.task_id == task_id:
            arrivals = scenario.arrivals if sc_task.role == LATENCY_SENSITIVE else None
            solo = replace(
                scenario,
                mechanism=NoMechanismConfig(),
                tasks=(replace(sc_task, footprint=None),),
                arrivals=arrivals,
                preemption=PreemptionConfig(),
                name=f"{scenario.name}-baseline-{task_id}",
            )
            return run(solo)
    raise KeyError(f"no task {task_id!r} in scenario")


def replay(log: EventLog, scenario: Scenario) -> dict:
    """Reconstruct final state by interpreting the log against fresh SM
    bookkeeping, validating resource conservation at every event.

    Raises ReplayDivergenceError with the offending event index when the
    log is inconsistent (over-allocation, completion of a block that never
    dispatched, non-monotonic clock).
    """
    gpu = scenario.gpu
    limits = gpu.sm_limits
    resident: list[dict[str, ResourceVector]] = [dict() for _ in range(gpu.num_sms)]
    tasks_state: dict[str, dict] = {
        t.trace.task_id: {"requests_completed": 0, "done": False}
        for t in scenario.tasks
    }
    last_time = 0.0

    def free_of(sm_index: int) -> ResourceVector:
        used = ResourceVector()
        for demand in resident[sm_index].values():
            used = used + demand
        return limits - used

    def check_conservation(index: int, sm_index: int) -> None:
        free = free_of(sm_index)
        if free.clamped_floor() != free:
            raise ReplayDivergenceError(
                index, f"SM {sm_index} over-allocated: free={free.as_dict()}"
            )

    for index, record in enumerate(log):
        t = record["time_us"]
        if t < last_time:
            raise ReplayDivergenceError(index, "clock moved backwards")
        last_time = t
        kind = record["kind"]
        if kind == "block-dispatch":
            sm_index = record["sm_id"]
            key = f"{record['kernel']}/b{record['block_index']}"
            if key in resident[sm_index]:
                raise ReplayDivergenceError(index, f"block {key} dispatched twice")
            demand = ResourceVector(**record["demand"])
            if not demand.fits_within(free_of(sm_index)):
                raise ReplayDivergenceError(
                    index, f"block {key} dispatched into insufficient space"
                )
            resident[sm_index][key] = demand
            check_conservation(index, sm_index)
        elif kind == "block-complete":
            sm_index = record["sm_id"]
            key = f"{record['kernel']}/b{record['block_index']}"
            if key not in resident[sm_index]:
                raise ReplayDivergenceError(
                    index, f"completion of block {key} that is not resident"
                )
            del resident[sm_index][key]
            check_conservation(index, sm_index)
        elif kind == "preempt-save-done":
            for victim in record.get("victims", []):
                key = victim["block"]
                sm_index = victim["sm_id"]
                if key not in resident[sm_index]:
                    raise ReplayDivergenceError(
                        index, f"checkpoint of block {key} that is not resident"
                    )
                del resident[sm_index][key]
                check_conservation(index, sm_index)
        if record.get("completes_request") is not None:
            tasks_state[record["request_task"]]["requests_completed"] += 1
        if kind == "task-complete":
            tasks_state[record["task"]]["done"] = True
    return {
        "time_us": last_time,
        "tasks": tasks_state,
        "resident_blocks": [sorted(r.keys()) for r in resident],
    }
