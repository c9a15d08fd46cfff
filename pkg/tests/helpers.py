"""Shared builders for the test suite."""

from __future__ import annotations

import random

from smsim.engine import EventLog, Scenario, ScenarioTask
from smsim.mechanisms import MpsConfig, NoMechanismConfig, PriorityStreamsConfig, TimeSlicingConfig
from smsim.resources import GpuConfig, KernelDescriptor
from smsim.workload import KernelInvocation, TaskTrace


def make_trace(task_id, kernels, kind="training", gaps=None, mem=0.0, transfers=None):
    """kernels: list of (grid, threads, regs, smem, duration)."""
    invocations = []
    for i, (grid, threads, regs, smem, duration) in enumerate(kernels):
        invocations.append(
            KernelInvocation(
                kernel=KernelDescriptor(
                    name=f"{task_id}-k{i}",
                    grid_blocks=grid,
                    threads_per_block=threads,
                    regs_per_thread=regs,
                    shared_mem_per_block=smem,
                    isolated_duration=duration,
                ),
                gap_after=None if gaps is None else gaps[i],
                transfers=tuple(transfers[i]) if transfers else (),
            )
        )
    return TaskTrace(task_id, kind, tuple(invocations), global_mem_alloc=mem)


def single_kernel_trace(task_id, grid, threads, duration, regs=0, gap=0.0, kind="training"):
    return make_trace(task_id, [(grid, threads, regs, 0.0, duration)], kind=kind, gaps=[gap])


def small_gpu(num_sms=4):
    return GpuConfig(num_sms=num_sms)


def random_small_scenario(rng: random.Random, mechanism_kind: str) -> Scenario:
    """A random admissible instance from the reference simulator's supported
    class: integer durations shaped as waves * per-block time, integer gaps,
    no transfers, single-pass best-effort tasks."""
    from smsim.mechanisms import admit_process, derive_footprint, AdmissionError

    while True:
        scenario = _random_small_scenario_once(rng, mechanism_kind)
        if mechanism_kind != "timeslicing":
            return scenario
        residents = []
        try:
            for sc_task in scenario.tasks:
                ctx = derive_footprint(sc_task.trace, scenario.gpu)
                admit_process(ctx, residents, scenario.gpu)
                residents.append(ctx)
            return scenario
        except AdmissionError:
            continue  # re-roll footprints that cannot co-reside


def _random_small_scenario_once(rng: random.Random, mechanism_kind: str) -> Scenario:
    gpu = GpuConfig(num_sms=rng.randint(1, 4))
    num_tasks = rng.randint(1, 3) if mechanism_kind != "none" else rng.randint(1, 2)
    if mechanism_kind in ("timeslicing", "mps") and num_tasks == 1:
        num_tasks = 2
    tasks = []
    for ti in range(num_tasks):
        kernels = []
        gaps = []
        for ki in range(rng.randint(1, 3)):
            threads = rng.choice([64, 128, 256, 512, 768, 1024])
            regs = rng.choice([0, 8, 16, 32])
            smem = rng.choice([0.0, 8.0, 64.0])
            grid = rng.randint(1, 6)
            per_sm = min(
                gpu.blocks_per_sm,
                gpu.threads_per_sm // threads,
            )
            if regs:
                per_sm = min(per_sm, gpu.registers_per_sm // (threads * regs))
            if smem:
                per_sm = min(per_sm, int(gpu.shared_mem_per_sm // smem))
            capacity = gpu.num_sms * per_sm
            waves = -(-grid // capacity)
            per_block = rng.randint(3, 40)
            kernels.append((grid, threads, regs, smem, float(waves * per_block)))
            gaps.append(float(rng.randint(0, 15)))
        tasks.append(ScenarioTask(make_trace(f"t{ti}", kernels, gaps=gaps)))
    if mechanism_kind == "none":
        mech = NoMechanismConfig()
    elif mechanism_kind == "streams":
        mech = PriorityStreamsConfig(
            priorities={
                f"t{ti}": rng.choice([-2, -1, 0]) for ti in range(num_tasks)
            }
        )
    elif mechanism_kind == "timeslicing":
        mech = TimeSlicingConfig(
            slice_length=float(rng.randint(30, 200)),
            ctx_save_cost=float(rng.randint(0, 25)),
            ctx_restore_cost=float(rng.randint(0, 25)),
        )
    elif mechanism_kind == "mps":
        caps = {}
        total_threads = gpu.num_sms * gpu.threads_per_sm
        for ti, task in enumerate(tasks):
            widest = max(
                inv.kernel.threads_per_block for inv in task.trace.invocations
            )
            # a cap below one block's thread count can never dispatch
            if widest > 0.5 * total_threads:
                caps[f"t{ti}"] = 100.0
            else:
                caps[f"t{ti}"] = rng.choice([50.0, 100.0])
        mech = MpsConfig(thread_limit_pct=caps)
    else:
        raise ValueError(mechanism_kind)
    return Scenario(gpu=gpu, mechanism=mech, tasks=tuple(tasks), gap_default=10.0)


def engine_schedule(log: EventLog) -> dict:
    """{(kernel_key, block_index): (dispatch_times, completion_time)} from an
    event log, for comparison against the reference simulator."""
    out: dict = {}
    for record in log:
        if record["kind"] == "block-dispatch":
            key = (record["kernel"], record["block_index"])
            dispatches, completion = out.get(key, ((), None))
            out[key] = (dispatches + (record["time_us"],), completion)
        elif record["kind"] == "block-complete":
            key = (record["kernel"], record["block_index"])
            dispatches, _ = out.get(key, ((), None))
            out[key] = (dispatches, record["time_us"])
    return out
