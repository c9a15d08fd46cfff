"""Fine-grained thread-block preemption: cost model, victim selection,
space reservations, and latency-hiding policy configuration.

Preempting an executing block checkpoints its context (registers, shared
memory, constant memory) to global memory; the block later re-dispatches
and resumes with its remaining work intact. The dominant cost is the
state-save transfer time, so the cost model is a state-size ledger divided
by memory bandwidth. Sizes use binary KB and bandwidth binary GB/s, which
is the convention the per-SM ledger numbers were derived under.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .block_scheduler import EXECUTING, BlockRun, SmState
from .resources import GpuConfig, ResourceVector

# microseconds per (KB / (GB/s)) with KB = 2^10 bytes, GB = 2^30 bytes
_KB_PER_GBPS_TO_US = 1e6 / 1024**2

PREEMPTION_POLICIES = (
    "on-arrival",
    "pre-drain",
    "transfer-overlap",
    "leave-space",
    "combined",
)


@dataclass(frozen=True)
class PreemptionCostModel:
    """State-size ledger for a checkpoint of one SM plus device-shared state.

    ``bandwidth_share_policy`` controls multi-SM saves: ``per-sm-fair``
    gives each SM bandwidth/num_sms and lets saves proceed in parallel
    (latency is flat in the number of SMs); ``full`` gives each save the
    whole bandwidth but serializes them. ``fixed_save_cost`` short-circuits
    the computation entirely.
    """

    constant_kb: float = 64.0
    l1_shared_kb: float = 128.0
    register_file_kb: float = 256.0
    l2_kb: float = 6144.0
    bandwidth: float = 936.0  # GB/s
    bandwidth_share_policy: str = "per-sm-fair"
    fixed_save_cost: Optional[float] = None  # us

    def __post_init__(self):
        for name in ("constant_kb", "l1_shared_kb", "register_file_kb", "l2_kb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.bandwidth_share_policy not in ("full", "per-sm-fair"):
            raise ValueError(
                f"bad bandwidth_share_policy {self.bandwidth_share_policy!r}"
            )
        if self.fixed_save_cost is not None and self.fixed_save_cost < 0:
            raise ValueError("fixed_save_cost must be >= 0")

    @property
    def per_sm_kb(self) -> float:
        return self.constant_kb + self.l1_shared_kb + self.register_file_kb


def cost_full_gpu(model: PreemptionCostModel, gpu: GpuConfig) -> float:
    """Latency (us) to save the whole device's context to global memory.

    Constant memory is device-broadcast state and is counted once; L1/shared
    and the register file are per-SM; the L2 is shared. With the default
    ledger this totals 37696 KB.
    """
    if model.fixed_save_cost is not None:
        return model.fixed_save_cost
    total_kb = (
        model.constant_kb
        + gpu.num_sms * (model.l1_shared_kb + model.register_file_kb)
        + model.l2_kb
    )
    return total_kb / model.bandwidth * _KB_PER_GBPS_TO_US


def cost_per_sm(
    model: PreemptionCostModel, gpu: GpuConfig, sms_affected: int = 1
) -> float:
    """Latency (us) to save the context of ``sms_affected`` SMs.

    Under per-sm-fair sharing each SM saves concurrently at its
    bandwidth/num_sms share, so the latency does not grow with the SM
    count; under full sharing the saves serialize at full bandwidth.
    """
    if sms_affected < 1:
        raise ValueError("sms_affected must be >= 1")
    if model.fixed_save_cost is not None:
        return model.fixed_save_cost
    if model.bandwidth_share_policy == "per-sm-fair":
        fair_share = model.bandwidth / gpu.num_sms
        return model.per_sm_kb / fair_share * _KB_PER_GBPS_TO_US
    return sms_affected * model.per_sm_kb / model.bandwidth * _KB_PER_GBPS_TO_US


@dataclass
class PreemptionPlan:
    """A concrete set of victims to checkpoint, with the freed space and
    the save latency the engine will charge before that space is usable."""

    victims: list[BlockRun]
    freed_per_sm: dict[int, ResourceVector]
    save_latency: float
    trigger: str

    @property
    def sms_affected(self) -> int:
        return len(self.freed_per_sm)


def _remaining_now(block: BlockRun, now: float) -> float:
    if block.frozen_at is not None or block.exec_start is None:
        return block.remaining_work
    elapsed = max(0.0, now - max(block.exec_start, block.last_settle or block.exec_start))
    return max(0.0, block.remaining_work - elapsed * block.rate)


def _eligible_victims(
    sms: list[SmState], protected_tasks: set[str], now: float
) -> list[BlockRun]:
    """Executing, not already being saved, not owned by a protected task;
    ordered by ascending remaining work (ties by task, kernel, block)."""
    out = []
    for sm in sms:
        for block in sm.resident:
            if block.state != EXECUTING or block.frozen_at is not None:
                continue
            if block.kernel.task_id in protected_tasks:
                continue
            out.append(block)
    out.sort(
        key=lambda b: (
            _remaining_now(b, now),
            b.kernel.task_id,
            b.kernel.arrival_time,
            b.block_index,
        )
    )
    return out


def _placeable_count(
    need: ResourceVector,
    sms: list[SmState],
    freed: dict[int, ResourceVector],
    reserved_fn=None,
) -> int:
    """How many blocks of demand ``need`` fit, given current free space plus
    the per-SM amounts in ``freed``."""
    total = 0
    for sm in sms:
        avail = sm.free + freed.get(sm.sm_id, ResourceVector())
        if reserved_fn is not None:
            avail = (avail - reserved_fn(sm)).clamped_floor()
        count = None
        for kind in ("threads", "blocks", "registers", "shared_mem"):
            demand = need.get(kind)
            if demand > 0:
                fit = math.floor(avail.get(kind) / demand + 1e-9)
                count = fit if count is None else min(count, fit)
        total += max(0, count if count is not None else 0)
    return total


def select_victims(
    need: ResourceVector,
    target_count: int,
    sms: list[SmState],
    protected_tasks: set[str],
    cost_model: PreemptionCostModel,
    gpu: GpuConfig,
    now: float = 0.0,
    trigger: str = "on-arrival",
    reserved_fn=None,
) -> Optional[PreemptionPlan]:
    """Pick blocks to checkpoint so ``target_count`` blocks of per-block
    demand ``need`` become placeable.

    Victims are taken greedily in ascending remaining-work order (least
    disturbed work first). Returns a zero-victim plan if the space already
    exists, or None if preempting every eligible block would still not be
    enough.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    freed: dict[int, ResourceVector] = {}
    if _placeable_count(need, sms, freed, reserved_fn) >= target_count:
        return PreemptionPlan([], {}, 0.0, trigger)
    victims: list[BlockRun] = []
    for block in _eligible_victims(sms, protected_tasks, now):
        victims.append(block)
        sm_id = block.sm_id
        freed[sm_id] = freed.get(sm_id, ResourceVector()) + block.demand
        if _placeable_count(need, sms, freed, reserved_fn) >= target_count:
            latency = cost_per_sm(cost_model, gpu, sms_affected=len(freed))
            return PreemptionPlan(victims, freed, latency, trigger)
    return None


def select_victims_aggregate(
    amount: ResourceVector,
    sms: list[SmState],
    protected_tasks: set[str],
    cost_model: PreemptionCostModel,
    gpu: GpuConfig,
    now: float = 0.0,
    trigger: str = "on-arrival",
) -> Optional[PreemptionPlan]:
    """Free at least ``amount`` of aggregate space across the device.

    Used for minimum-reservation floors, where the requirement is a total
    amount of resources rather than a placeable block count.
    """
    freed: dict[int, ResourceVector] = {}
    victims: list[BlockRun] = []

    def total_free() -> ResourceVector:
        acc = ResourceVector()
        for sm in sms:
            acc = acc + sm.free
        for vec in freed.values():
            acc = acc + vec
        return acc

    if amount.fits_within(total_free()):
        return PreemptionPlan([], {}, 0.0, trigger)
    for block in _eligible_victims(sms, protected_tasks, now):
        victims.append(block)
        sm_id = block.sm_id
        freed[sm_id] = freed.get(sm_id, ResourceVector()) + block.demand
        if amount.fits_within(total_free()):
            latency = cost_per_sm(cost_model, gpu, sms_affected=len(freed))
            return PreemptionPlan(victims, freed, latency, trigger)
    return None


@dataclass
class Reservation:
    beneficiary_key: str  # kernel key the space is held for
    sm_id: int
    amount: ResourceVector
    expires_at: float


class ReservationLedger:
    """Space withheld from backfill for an upcoming latency-sensitive kernel.

    Reservations subtract from the free view other tasks' placements see;
    the beneficiary consumes them as its blocks dispatch, and anything left
    lapses at the expiry time.
    """

    def __init__(self):
        self.entries: list[Reservation] = []

    def __bool__(self):
        return bool(self.entries)

    def reserve(
        self, beneficiary_key: str, sm_id: int, amount: ResourceVector, expires_at: float
    ) -> None:
        self.entries.append(Reservation(beneficiary_key, sm_id, amount, expires_at))

    def reserved_against(self, sm: SmState, kernel_key: str, now: float) -> ResourceVector:
        """Total space on ``sm`` held for kernels other than ``kernel_key``."""
        acc = ResourceVector()
        for entry in self.entries:
            if entry.sm_id == sm.sm_id and entry.beneficiary_key != kernel_key:
                if entry.expires_at > now:
                    acc = acc + entry.amount
        return acc

    def consume(self, kernel_key: str, sm_id: int, demand: ResourceVector) -> None:
        """Beneficiary dispatched a block: shrink its reservations on that SM."""
        for entry in self.entries:
            if entry.beneficiary_key != kernel_key or entry.sm_id != sm_id:
                continue
            take = ResourceVector(
                min(entry.amount.threads, demand.threads),
                min(entry.amount.blocks, demand.blocks),
                min(entry.amount.registers, demand.registers),
                min(entry.amount.shared_mem, demand.shared_mem),
            )
            entry.amount = (entry.amount - take).clamped_floor()
            demand = (demand - take).clamped_floor()
            if demand == ResourceVector():
                break
        self.entries = [e for e in self.entries if e.amount != ResourceVector()]

    def release_for(self, kernel_key: str) -> None:
        self.entries = [e for e in self.entries if e.beneficiary_key != kernel_key]

    def drop_expired(self, now: float) -> None:
        self.entries = [e for e in self.entries if e.expires_at > now]


@dataclass(frozen=True)
class PreemptionConfig:
    """Scenario-level switchboard for fine-grained preemption."""

    enabled: bool = False
    policy: str = "on-arrival"
    cost_model: PreemptionCostModel = field(default_factory=PreemptionCostModel)
    # Space freed ahead of an expected kernel is withheld from backfill for
    # this long; None means "use the scenario's default launch gap".
    leave_space_window: Optional[float] = None
    # Aggregate resource floor per task id (multi-process service clients).
    min_reservation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in PREEMPTION_POLICIES:
            raise ValueError(f"bad preemption policy {self.policy!r}")

    def wants(self, policy: str) -> bool:
        return self.enabled and self.policy in (policy, "combined")
