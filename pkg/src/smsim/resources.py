"""Simulated GPU device model and per-SM resource accounting.

An SM (streaming multiprocessor) has hard per-unit limits on four
schedulable resources: threads, block slots, 32-bit registers, and shared
memory. A kernel's thread blocks are admitted against those limits; the
first dimension to run out is the kernel's limiting resource.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

RESOURCE_KINDS = ("threads", "blocks", "registers", "shared_mem")

MAX_THREADS_PER_BLOCK = 1024

# Kernels running strictly longer than this in isolation count as long-running.
LONG_RUNNING_THRESHOLD_US = 1000.0


@dataclass(frozen=True)
class ResourceVector:
    """Four-dimensional occupancy bookkeeping unit.

    Units: threads (count), blocks (count), registers (count of 32-bit
    registers), shared_mem (KB). All arithmetic is component-wise.
    Occupancy quantities are non-negative at domain boundaries (demands,
    limits); difference expressions may carry transient negative
    components, which ``clamped_floor`` resolves.
    """

    threads: float = 0
    blocks: float = 0
    registers: float = 0
    shared_mem: float = 0.0

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(
            self.threads + other.threads,
            self.blocks + other.blocks,
            self.registers + other.registers,
            self.shared_mem + other.shared_mem,
        )

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(
            self.threads - other.threads,
            self.blocks - other.blocks,
            self.registers - other.registers,
            self.shared_mem - other.shared_mem,
        )

    def scaled(self, factor: float) -> "ResourceVector":
        return ResourceVector(
            self.threads * factor,
            self.blocks * factor,
            self.registers * factor,
            self.shared_mem * factor,
        )

    def fits_within(self, other: "ResourceVector") -> bool:
        """Component-wise <= comparison."""
        return (
            self.threads <= other.threads
            and self.blocks <= other.blocks
            and self.registers <= other.registers
            and self.shared_mem <= other.shared_mem
        )

    def clamped_floor(self) -> "ResourceVector":
        """Clamp tiny negative float residue to zero."""
        return ResourceVector(
            max(self.threads, 0),
            max(self.blocks, 0),
            max(self.registers, 0),
            max(self.shared_mem, 0.0),
        )

    def get(self, kind: str) -> float:
        return getattr(self, kind)

    def as_dict(self) -> dict:
        return {kind: getattr(self, kind) for kind in RESOURCE_KINDS}


@dataclass(frozen=True)
class GpuConfig:
    """The simulated device.

    Defaults describe an 82-SM consumer GPU: 1536 threads and 16 block
    slots per SM, 64K 32-bit registers per SM, 24 GB global memory,
    6144 KB L2, and 936 GB/s memory bandwidth.

    Two shared-memory figures coexist on purpose: ``shared_mem_per_sm``
    (1024 KB) is the admission limit used for block scheduling, while the
    preemption cost model carries its own per-SM L1/shared state size
    (128 KB); see ``preemption.PreemptionCostModel``.
    """

    num_sms: int = 82
    threads_per_sm: int = 1536
    blocks_per_sm: int = 16
    registers_per_sm: int = 65536
    shared_mem_per_sm: float = 1024.0  # KB
    global_mem: float = 24576.0  # MB
    l2_cache: float = 6144.0  # KB
    constant_mem_per_sm: float = 64.0  # KB
    mem_bandwidth: float = 936.0  # GB/s
    slice_length: float = 2000.0  # us
    ctx_save_cost: float = 73.0  # us
    ctx_restore_cost: float = 73.0  # us

    def __post_init__(self):
        for name in (
            "num_sms",
            "threads_per_sm",
            "blocks_per_sm",
            "registers_per_sm",
            "shared_mem_per_sm",
            "global_mem",
            "l2_cache",
            "constant_mem_per_sm",
            "mem_bandwidth",
            "slice_length",
            "ctx_save_cost",
            "ctx_restore_cost",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"GpuConfig.{name} must be strictly positive")

    @property
    def sm_limits(self) -> ResourceVector:
        return ResourceVector(
            threads=self.threads_per_sm,
            blocks=self.blocks_per_sm,
            registers=self.registers_per_sm,
            shared_mem=self.shared_mem_per_sm,
        )

    @property
    def total_threads(self) -> int:
        return self.num_sms * self.threads_per_sm


@dataclass(frozen=True)
class KernelDescriptor:
    """Static shape of one kernel: grid size, per-block resource demand,
    and the kernel's runtime when executed alone on the device."""

    name: str
    grid_blocks: int
    threads_per_block: int
    regs_per_thread: int = 0
    shared_mem_per_block: float = 0.0  # KB
    isolated_duration: float = 1.0  # us

    def __post_init__(self):
        if self.grid_blocks < 1:
            raise ValueError(f"kernel {self.name!r}: grid_blocks must be >= 1")
        if not 1 <= self.threads_per_block <= MAX_THREADS_PER_BLOCK:
            raise ValueError(
                f"kernel {self.name!r}: threads_per_block must be in "
                f"[1, {MAX_THREADS_PER_BLOCK}]"
            )
        if self.regs_per_thread < 0:
            raise ValueError(f"kernel {self.name!r}: regs_per_thread must be >= 0")
        if self.shared_mem_per_block < 0:
            raise ValueError(f"kernel {self.name!r}: shared_mem_per_block must be >= 0")
        if self.isolated_duration <= 0:
            raise ValueError(f"kernel {self.name!r}: isolated_duration must be > 0")

    def validate_for(self, gpu: GpuConfig) -> None:
        """Raise if a single block of this kernel cannot fit on an empty SM."""
        demand = block_demand(self)
        if not demand.fits_within(gpu.sm_limits):
            raise ValueError(
                f"kernel {self.name!r}: per-block demand {demand.as_dict()} "
                f"exceeds SM limits {gpu.sm_limits.as_dict()}"
            )


def block_demand(kernel: KernelDescriptor) -> ResourceVector:
    """Resource demand of a single thread block of ``kernel``."""
    return ResourceVector(
        threads=kernel.threads_per_block,
        blocks=1,
        registers=kernel.threads_per_block * kernel.regs_per_thread,
        shared_mem=kernel.shared_mem_per_block,
    )


def max_resident_blocks_per_sm(kernel: KernelDescriptor, gpu: GpuConfig) -> int:
    """How many blocks of ``kernel`` fit on one empty SM.

    The answer is the minimum over the four resource dimensions of
    floor(SM limit / per-block demand); a zero demand does not constrain.
    """
    kernel.validate_for(gpu)
    demand = block_demand(kernel)
    limits = gpu.sm_limits
    best = gpu.blocks_per_sm
    for kind in RESOURCE_KINDS:
        need = demand.get(kind)
        if need > 0:
            ratio = limits.get(kind) / need  # may be inf for tiny demands
            if ratio < best:
                best = math.floor(ratio)
    return best


def limiting_resource(kernel: KernelDescriptor, gpu: GpuConfig) -> str:
    """The resource dimension exhausted first when packing blocks onto an SM.

    Ties break in the fixed order threads > blocks > registers > shared_mem.
    """
    cap = max_resident_blocks_per_sm(kernel, gpu)
    demand = block_demand(kernel)
    limits = gpu.sm_limits
    for kind in RESOURCE_KINDS:
        need = demand.get(kind)
        if need > 0 and math.floor(limits.get(kind) / need) == cap:
            return kind
    return "blocks"  # blocks_per_sm cap itself was the binding limit


def classify_kernel(kernel: KernelDescriptor, gpu: GpuConfig) -> dict:
    """Classify a kernel as large and/or long-running.

    Large: its grid cannot be entirely resident on the device at once.
    Long-running: isolated runtime strictly exceeds 1 ms.
    """
    capacity = gpu.num_sms * max_resident_blocks_per_sm(kernel, gpu)
    return {
        "large": kernel.grid_blocks > capacity,
        "long_running": kernel.isolated_duration > LONG_RUNNING_THRESHOLD_US,
    }
