"""Hardware thread-block scheduler model.

Two policies govern the scheduler: the leftover policy decides *which*
kernel supplies the next block (the head kernel must be fully dispatched
before any later-arriving kernel gets a block), and the most-room policy
decides *where* that block lands (the feasible SM with the most free
threads). Mechanisms inject themselves as a constraint object that orders
candidate kernels and vetoes placements (thread caps, reservations).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .resources import GpuConfig, KernelDescriptor, ResourceVector, block_demand

# Block lifecycle states.
PENDING = "pending"
EXECUTING = "executing"
CHECKPOINTED = "checkpointed"
DONE = "done"


class KernelRun:
    """One kernel invocation instance on its way through the scheduler.

    Blocks are materialized lazily at dispatch time; ``resumable`` holds
    checkpointed blocks awaiting re-dispatch, which take precedence over
    fresh blocks so preempted work drains first.
    """

    def __init__(
        self,
        key: str,
        descriptor: KernelDescriptor,
        arrival_time: float,
        per_block_duration: float,
        task_id: str,
        process_id: int = 0,
        priority: int = 0,
        task_index: int = 0,
    ):
        self.key = key
        self.descriptor = descriptor
        self.demand = block_demand(descriptor)
        self.arrival_time = arrival_time
        self.per_block_duration = per_block_duration
        self.task_id = task_id
        self.process_id = process_id
        self.priority = priority
        # Same-instant arrivals order by the owning task's position in the
        # scenario; a task has at most one live kernel, so (arrival_time,
        # task_index) totally orders live kernels.
        self.task_index = task_index
        self.next_fresh_index = 0
        self.resumable: list[BlockRun] = []  # kept sorted by block_index
        self.live_blocks: dict[int, BlockRun] = {}
        self.completed_blocks = 0

    @property
    def fresh_remaining(self) -> int:
        return self.descriptor.grid_blocks - self.next_fresh_index

    @property
    def undispatched(self) -> int:
        """Blocks still owed to the device: never-dispatched plus checkpointed."""
        return self.fresh_remaining + len(self.resumable)

    @property
    def finished(self) -> bool:
        return self.completed_blocks == self.descriptor.grid_blocks

    def peek_next_block(self) -> Optional["BlockRun"]:
        if self.resumable:
            return self.resumable[0]
        if self.fresh_remaining > 0:
            block = self.live_blocks.get(self.next_fresh_index)
            if block is None:
                block = BlockRun(self, self.next_fresh_index)
                self.live_blocks[self.next_fresh_index] = block
            return block
        return None

    def take_block(self, block: "BlockRun") -> None:
        """Consume ``block`` from the dispatchable pool."""
        if self.resumable and self.resumable[0] is block:
            self.resumable.pop(0)
        elif block.block_index == self.next_fresh_index:
            self.next_fresh_index += 1
        else:
            raise AssertionError(f"block {block} was not next in line")

    def return_checkpointed(self, block: "BlockRun") -> None:
        self.resumable.append(block)
        self.resumable.sort(key=lambda b: b.block_index)

    def __repr__(self):
        return f"KernelRun({self.key})"


class BlockRun:
    """Execution state of a single thread block."""

    __slots__ = (
        "kernel",
        "block_index",
        "sm_id",
        "state",
        "remaining_work",
        "preempt_count",
        "exec_start",
        "restore_cost",
        "frozen_at",
        "completion_version",
        "rate",
        "last_settle",
    )

    def __init__(self, kernel: KernelRun, block_index: int):
        self.kernel = kernel
        self.block_index = block_index
        self.sm_id: Optional[int] = None
        self.state = PENDING
        self.remaining_work = kernel.per_block_duration
        self.preempt_count = 0
        self.exec_start: Optional[float] = None  # progress begins here
        self.restore_cost = 0.0  # latency charged at next dispatch
        self.frozen_at: Optional[float] = None  # saving in progress since
        self.completion_version = 0
        self.rate = 1.0
        self.last_settle: Optional[float] = None

    @property
    def demand(self) -> ResourceVector:
        return self.kernel.demand

    @property
    def key(self) -> str:
        return f"{self.kernel.key}/b{self.block_index}"

    def __repr__(self):
        return f"BlockRun({self.key} {self.state})"


@dataclass
class SmState:
    """Free-resource bookkeeping for one SM.

    ``free`` is always recomputed as limits minus the sum of resident block
    demands, so conservation holds exactly even with float shared-memory
    sizes.
    """

    sm_id: int
    limits: ResourceVector
    free: ResourceVector = field(init=False)
    resident: list[BlockRun] = field(default_factory=list)

    def __post_init__(self):
        self.free = self.limits

    def _recompute_free(self) -> None:
        used = ResourceVector()
        for block in self.resident:
            used = used + block.demand
        self.free = self.limits - used

    def allocate(self, block: BlockRun) -> None:
        if not block.demand.fits_within(self.free):
            raise AssertionError(
                f"SM {self.sm_id}: block {block.key} does not fit"
            )
        self.resident.append(block)
        self._recompute_free()

    def release(self, block: BlockRun) -> None:
        self.resident.remove(block)
        self._recompute_free()

    def conserved(self) -> bool:
        used = ResourceVector()
        for block in self.resident:
            used = used + block.demand
        expected = self.limits - used
        return expected == self.free and expected.clamped_floor() == expected


def make_sms(gpu: GpuConfig) -> list[SmState]:
    return [SmState(sm_id=i, limits=gpu.sm_limits) for i in range(gpu.num_sms)]


class DispatchQueue:
    """Arrival-ordered kernel queue with leftover head-of-line semantics.

    A kernel leaves the queue only once it owes no more blocks. Ordering
    mode ``fifo`` serves the earliest-arrived kernel first; ``lifo`` the
    latest-arrived.
    """

    def __init__(self, mode: str = "fifo"):
        if mode not in ("fifo", "lifo"):
            raise ValueError(f"bad queue ordering mode {mode!r}")
        self.mode = mode
        self.entries: list[KernelRun] = []

    def add(self, kernel: KernelRun) -> None:
        if kernel not in self.entries:
            self.entries.append(kernel)
            self.entries.sort(key=lambda k: (k.arrival_time, k.task_index))

    def prune(self) -> None:
        self.entries = [k for k in self.entries if k.undispatched > 0]

    def head(self) -> Optional[KernelRun]:
        self.prune()
        if not self.entries:
            return None
        return self.entries[0] if self.mode == "fifo" else self.entries[-1]

    def __len__(self):
        self.prune()
        return len(self.entries)


def select_next_kernel(queue: DispatchQueue) -> Optional[KernelRun]:
    """The kernel whose blocks dispatch next, per the queue's ordering mode."""
    return queue.head()


FreeFn = Callable[[SmState], ResourceVector]


def place_block(
    block: BlockRun,
    sms: list[SmState],
    free_fn: Optional[FreeFn] = None,
) -> Optional[int]:
    """Most-room placement: among SMs where the block fits, pick the one
    with the most free threads; break ties by free registers, then free
    shared memory, then lowest sm_id. Returns None if no SM fits.

    ``free_fn`` lets callers substitute an effective free vector (e.g.
    raw free minus space reserved for another task).
    """
    demand = block.demand
    best_id = None
    best_key = None
    for sm in sms:
        free = free_fn(sm) if free_fn is not None else sm.free
        if not demand.fits_within(free):
            continue
        key = (free.threads, free.registers, free.shared_mem, -sm.sm_id)
        if best_key is None or key > best_key:
            best_key = key
            best_id = sm.sm_id
    return best_id


class DispatchConstraint:
    """Mechanism hook consulted by dispatch_round.

    ``candidates`` yields (kernel, blocking) pairs in dispatch-priority
    order; a blocking kernel that cannot place a block ends the round
    (head-of-line), a non-blocking one is skipped. ``admits`` vetoes
    starting one more block (thread caps). When a reservation ledger is
    injected, placement feasibility is judged against free space minus
    what is held for other kernels, and a head kernel stalled purely by a
    reservation does not block the round.
    """

    ledger = None  # ReservationLedger, injected by the engine
    now = 0.0

    def candidates(self) -> Iterator[tuple[KernelRun, bool]]:
        raise NotImplementedError

    def admits(self, block: BlockRun) -> bool:
        return True

    def free_view(self, block: BlockRun) -> Optional[FreeFn]:
        ledger = self.ledger
        if not ledger:
            return None
        key = block.kernel.key
        now = self.now
        return lambda sm: (sm.free - ledger.reserved_against(sm, key, now)).clamped_floor()

    def reservation_limited(self, block: BlockRun, sms: list[SmState]) -> bool:
        """True when only reserved space stands between the block and an SM."""
        if not self.ledger:
            return False
        return place_block(block, sms, None) is not None

    def on_dispatch(self, block: BlockRun) -> None:
        pass

    def on_release(self, block: BlockRun) -> None:
        pass


class SingleQueueConstraint(DispatchConstraint):
    """Plain leftover policy over one queue; no extra constraints."""

    def __init__(self, queue: DispatchQueue):
        self.queue = queue

    def candidates(self):
        head = self.queue.head()
        if head is not None:
            yield head, True


PlaceCallback = Callable[[BlockRun, int, list], None]


def dispatch_round(
    constraint: DispatchConstraint,
    sms: list[SmState],
    on_place: Optional[PlaceCallback] = None,
) -> list[tuple[BlockRun, int]]:
    """One scheduling pass: place blocks one at a time, re-evaluating the
    candidate order and SM state after every placement, until no eligible
    block fits anywhere.

    ``on_place`` receives each placement plus the list of (kernel, reason)
    pairs that were passed over before it, so head-of-line bypasses are
    auditable from the event log.
    """
    placements: list[tuple[BlockRun, int]] = []
    while True:
        placed = False
        bypassed: list[tuple[KernelRun, str]] = []
        for kernel, blocking in constraint.candidates():
            block = kernel.peek_next_block()
            if block is None:
                continue
            if not constraint.admits(block):
                if blocking:
                    break
                bypassed.append((kernel, "thread-cap"))
                continue
            sm_id = place_block(block, sms, constraint.free_view(block))
            if sm_id is None:
                if blocking:
                    if constraint.reservation_limited(block, sms):
                        bypassed.append((kernel, "reservation"))
                        continue
                    break
                bypassed.append((kernel, "no-space"))
                continue
            kernel.take_block(block)
            block.sm_id = sm_id
            block.state = EXECUTING
            sms[sm_id].allocate(block)
            constraint.on_dispatch(block)
            placements.append((block, sm_id))
            if on_place is not None:
                on_place(block, sm_id, bypassed)
            placed = True
            break
        if not placed:
            return placements
