"""Scenario file loading and validation.

A scenario is one JSON document naming the device, the concurrency
mechanism, the participating task traces and their roles, the request
arrival pattern, engine parameters, and preemption settings. The schema is
strict: unknown keys are errors, so typos fail loudly instead of silently
running a different experiment.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from .engine import Scenario, ScenarioTask
from .mechanisms import (
    MpsConfig,
    NoMechanismConfig,
    PriorityStreamsConfig,
    ProcessContext,
    TimeSlicingConfig,
)
from .preemption import PreemptionConfig, PreemptionCostModel
from .resources import GpuConfig, ResourceVector
from .workload import ArrivalPattern, load_trace


class ScenarioError(Exception):
    """Scenario file failed to parse or validate."""


_GPU_KEYS = {
    "num_sms": "num_sms",
    "threads_per_sm": "threads_per_sm",
    "blocks_per_sm": "blocks_per_sm",
    "registers_per_sm": "registers_per_sm",
    "shared_mem_per_sm_kb": "shared_mem_per_sm",
    "global_mem_mb": "global_mem",
    "l2_cache_kb": "l2_cache",
    "constant_mem_per_sm_kb": "constant_mem_per_sm",
    "mem_bandwidth_gbps": "mem_bandwidth",
    "slice_length_us": "slice_length",
    "ctx_save_cost_us": "ctx_save_cost",
    "ctx_restore_cost_us": "ctx_restore_cost",
}

_TOP_KEYS = {
    "name",
    "gpu",
    "mechanism",
    "tasks",
    "arrivals",
    "engine",
    "preemption",
}

_TASK_KEYS = {"trace", "role", "stream_priority", "thread_limit_pct", "footprint"}
_FOOTPRINT_KEYS = {"global_mem_mb", "per_sm_registers", "per_sm_shared_kb"}
_ARRIVAL_KEYS = {"mode", "num_requests", "rate_per_s", "seed"}
_ENGINE_KEYS = {
    "contention_alpha",
    "gap_default_us",
    "host_bandwidth_gbps",
    "seed",
    "horizon_us",
    "max_events",
}
_PREEMPTION_KEYS = {
    "enabled",
    "policy",
    "cost_model",
    "leave_space_window_us",
    "min_reservation",
}
_COST_MODEL_KEYS = {
    "constant_kb",
    "l1_shared_kb",
    "register_file_kb",
    "l2_kb",
    "bandwidth_gbps",
    "share_policy",
    "fixed_save_cost_us",
}
_RESERVATION_KEYS = {"threads", "blocks", "registers", "shared_mem_kb"}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")


def _parse_gpu(obj: dict) -> GpuConfig:
    _reject_unknown(obj, set(_GPU_KEYS), "gpu")
    try:
        return GpuConfig(**{_GPU_KEYS[k]: v for k, v in obj.items()})
    except ValueError as exc:
        raise ScenarioError(f"gpu: {exc}") from exc


def _parse_mechanism(obj: dict):
    if "kind" not in obj:
        raise ScenarioError("mechanism: missing 'kind'")
    kind = obj["kind"]
    rest = {k: v for k, v in obj.items() if k != "kind"}
    try:
        if kind == "none":
            _reject_unknown(rest, set(), "mechanism")
            return NoMechanismConfig()
        if kind == "streams":
            _reject_unknown(rest, {"priorities", "queue_mode"}, "mechanism")
            return PriorityStreamsConfig(
                priorities=dict(rest.get("priorities", {})),
                queue_mode=rest.get("queue_mode", "fifo"),
            )
        if kind == "timeslicing":
            _reject_unknown(
                rest,
                {"slice_length_us", "ctx_save_cost_us", "ctx_restore_cost_us"},
                "mechanism",
            )
            return TimeSlicingConfig(
                slice_length=rest.get("slice_length_us"),
                ctx_save_cost=rest.get("ctx_save_cost_us"),
                ctx_restore_cost=rest.get("ctx_restore_cost_us"),
            )
        if kind == "mps":
            _reject_unknown(rest, {"thread_limit_pct", "allow_cap_bypass"}, "mechanism")
            return MpsConfig(
                thread_limit_pct=dict(rest.get("thread_limit_pct", {})),
                allow_cap_bypass=rest.get("allow_cap_bypass", True),
            )
    except ValueError as exc:
        raise ScenarioError(f"mechanism: {exc}") from exc
    raise ScenarioError(f"mechanism: unknown kind {kind!r}")


def _parse_task(obj: dict, base_dir: Path, index: int) -> ScenarioTask:
    where = f"tasks[{index}]"
    _reject_unknown(obj, _TASK_KEYS, where)
    if "trace" not in obj:
        raise ScenarioError(f"{where}: missing 'trace'")
    trace = load_trace(base_dir / obj["trace"])
    footprint: Optional[ProcessContext] = None
    if "footprint" in obj:
        fp = obj["footprint"]
        _reject_unknown(fp, _FOOTPRINT_KEYS, f"{where}.footprint")
        footprint = ProcessContext(
            client_id=trace.task_id,
            global_mem=float(fp.get("global_mem_mb", 0.0)),
            per_sm_registers=float(fp.get("per_sm_registers", 0.0)),
            per_sm_shared=float(fp.get("per_sm_shared_kb", 0.0)),
        )
    try:
        return ScenarioTask(
            trace=trace,
            role=obj.get("role", "best-effort"),
            stream_priority=obj.get("stream_priority"),
            thread_limit_pct=obj.get("thread_limit_pct"),
            footprint=footprint,
        )
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def _parse_arrivals(obj: dict) -> ArrivalPattern:
    _reject_unknown(obj, _ARRIVAL_KEYS, "arrivals")
    if "mode" not in obj:
        raise ScenarioError("arrivals: missing 'mode'")
    try:
        return ArrivalPattern(
            mode=obj["mode"],
            num_requests=int(obj.get("num_requests", 1)),
            rate=float(obj.get("rate_per_s", 0.0)),
            seed=obj.get("seed"),
        )
    except ValueError as exc:
        raise ScenarioError(f"arrivals: {exc}") from exc


def _parse_reservation(obj: dict, where: str) -> ResourceVector:
    _reject_unknown(obj, _RESERVATION_KEYS, where)
    return ResourceVector(
        threads=obj.get("threads", 0),
        blocks=obj.get("blocks", 0),
        registers=obj.get("registers", 0),
        shared_mem=obj.get("shared_mem_kb", 0.0),
    )


def _parse_preemption(obj: dict) -> PreemptionConfig:
    _reject_unknown(obj, _PREEMPTION_KEYS, "preemption")
    cost = PreemptionCostModel()
    if "cost_model" in obj:
        cm = obj["cost_model"]
        _reject_unknown(cm, _COST_MODEL_KEYS, "preemption.cost_model")
        try:
            cost = PreemptionCostModel(
                constant_kb=float(cm.get("constant_kb", 64.0)),
                l1_shared_kb=float(cm.get("l1_shared_kb", 128.0)),
                register_file_kb=float(cm.get("register_file_kb", 256.0)),
                l2_kb=float(cm.get("l2_kb", 6144.0)),
                bandwidth=float(cm.get("bandwidth_gbps", 936.0)),
                bandwidth_share_policy=cm.get("share_policy", "per-sm-fair"),
                fixed_save_cost=cm.get("fixed_save_cost_us"),
            )
        except ValueError as exc:
            raise ScenarioError(f"preemption.cost_model: {exc}") from exc
    reservations = {}
    for task_id, vec in obj.get("min_reservation", {}).items():
        reservations[task_id] = _parse_reservation(
            vec, f"preemption.min_reservation[{task_id!r}]"
        )
    try:
        return PreemptionConfig(
            enabled=bool(obj.get("enabled", False)),
            policy=obj.get("policy", "on-arrival"),
            cost_model=cost,
            leave_space_window=obj.get("leave_space_window_us"),
            min_reservation=reservations,
        )
    except ValueError as exc:
        raise ScenarioError(f"preemption: {exc}") from exc


def scenario_from_obj(obj: dict, base_dir: str | Path = ".") -> Scenario:
    base_dir = Path(base_dir)
    if not isinstance(obj, dict):
        raise ScenarioError("scenario root: expected an object")
    _reject_unknown(obj, _TOP_KEYS, "scenario root")
    if "tasks" not in obj or not obj["tasks"]:
        raise ScenarioError("scenario root: missing or empty 'tasks'")
    gpu = _parse_gpu(obj.get("gpu", {}))
    mechanism = _parse_mechanism(obj.get("mechanism", {"kind": "none"}))
    tasks = tuple(
        _parse_task(t, base_dir, i) for i, t in enumerate(obj["tasks"])
    )
    arrivals = _parse_arrivals(obj["arrivals"]) if "arrivals" in obj else None
    eng = obj.get("engine", {})
    _reject_unknown(eng, _ENGINE_KEYS, "engine")
    preemption = _parse_preemption(obj.get("preemption", {}))
    try:
        return Scenario(
            gpu=gpu,
            mechanism=mechanism,
            tasks=tasks,
            arrivals=arrivals,
            contention_alpha=float(eng.get("contention_alpha", 0.0)),
            gap_default=float(eng.get("gap_default_us", 20.0)),
            host_bandwidth=float(eng.get("host_bandwidth_gbps", 16.0)),
            seed=int(eng.get("seed", 0)),
            preemption=preemption,
            horizon=eng.get("horizon_us"),
            max_events=int(eng.get("max_events", 50_000_000)),
            name=obj.get("name", "scenario"),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path: str | Path, seed_override: Optional[int] = None) -> Scenario:
    path = Path(path)
    obj = load_scenario_obj(path)
    if seed_override is not None:
        obj.setdefault("engine", {})["seed"] = seed_override
    return scenario_from_obj(obj, base_dir=path.parent)


def load_scenario_obj(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def apply_override(obj: dict, key_path: str, value) -> None:
    """Set a (possibly nested) scenario key, for parameter sweeps.

    ``mechanism`` as a bare string value selects a mechanism kind with
    defaults; dotted paths descend into nested objects.
    """
    if key_path == "mechanism" and isinstance(value, str):
        obj["mechanism"] = {"kind": value}
        return
    parts = key_path.split(".")
    node = obj
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ScenarioError(f"cannot descend into {part!r} in {key_path!r}")
    node[parts[-1]] = value
