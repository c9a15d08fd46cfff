"""Deterministic discrete-event simulator of GPU thread-block scheduling
under priority streams, time-slicing, and MPS, with fine-grained
block-level preemption and latency-hiding policies."""

from .engine import (
    EventLog,
    ReplayDivergenceError,
    RunResult,
    Scenario,
    ScenarioTask,
    StarvationError,
    replay,
    run,
    run_baseline,
)
from .mechanisms import (
    AdmissionError,
    MpsConfig,
    NoMechanismConfig,
    PriorityStreamsConfig,
    ProcessContext,
    TimeSlicingConfig,
    admit_process,
    recommended_thread_limit_pct,
)
from .metrics import SimReport, summarize
from .preemption import (
    PreemptionConfig,
    PreemptionCostModel,
    cost_full_gpu,
    cost_per_sm,
    select_victims,
)
from .resources import (
    GpuConfig,
    KernelDescriptor,
    ResourceVector,
    block_demand,
    classify_kernel,
    limiting_resource,
    max_resident_blocks_per_sm,
)
from .scenario_io import ScenarioError, load_scenario, scenario_from_obj
from .workload import (
    ArrivalPattern,
    KernelInvocation,
    SynthesisSpec,
    TaskTrace,
    TraceError,
    TransferOp,
    emit_trace,
    generate_arrivals,
    load_trace,
    synthesize_trace,
    trace_stats,
)

__version__ = "0.1.0"
