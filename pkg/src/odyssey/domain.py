"""Shared domain types: hardware profile, execution plans, cluster state.

All types are frozen dataclasses (immutable, hashable, safe to share across
threads). Times are 64-bit floating seconds; memory quantities are integer
bytes so they compare exactly against a hard device limit.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields


class SchemaError(ValueError):
    """An input document does not match the expected schema."""


class InfeasibleError(RuntimeError):
    """No valid plan exists under the given constraints."""


class Policy(enum.Enum):
    """How the cluster absorbs node failures."""

    DATA_REROUTING = "data_rerouting"
    DYNAMIC_PARALLELISM = "dynamic_parallelism"


@dataclass(frozen=True)
class Profile:
    """Measured per-layer costs and hardware limits of one node class.

    All timing fields are seconds, all memory fields are bytes.
    ``link_bandwidth`` is bytes/second for inter-node point-to-point copies.
    """

    t_forward_per_layer: float
    t_backward_per_layer: float
    mem_params_per_layer: int
    mem_optimizer_per_layer: int
    mem_grads_per_layer: int
    mem_activation_per_layer_per_microbatch: int
    weight_bytes_per_layer: int
    link_bandwidth: float
    allreduce_time_per_layer: float
    restart_overhead: float
    device_memory_limit: int
    num_layers: int

    def validate(self) -> list[str]:
        """Return human-readable violations; empty list when well formed."""
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                out.append(f"profile.{f.name} must be a number, got {value!r}")
                continue
            if value <= 0:
                out.append(f"profile.{f.name} must be strictly positive, got {value!r}")
        if self.mem_grads_per_layer != self.mem_params_per_layer:
            out.append(
                "profile.mem_grads_per_layer must equal mem_params_per_layer "
                f"({self.mem_grads_per_layer} != {self.mem_params_per_layer})"
            )
        if not isinstance(self.num_layers, bool) and isinstance(self.num_layers, int):
            if self.num_layers < 1:
                out.append(f"profile.num_layers must be >= 1, got {self.num_layers}")
        return out


@dataclass(frozen=True)
class ParallelConfig:
    """Parallel shape: number of pipelines and per-pipeline stage counts."""

    dp_degree: int
    stage_counts: tuple[int, ...]

    @property
    def n_nodes(self) -> int:
        """Nodes the shape occupies (one node per stage per pipeline)."""
        return sum(self.stage_counts)

    @property
    def is_symmetric(self) -> bool:
        return len(set(self.stage_counts)) <= 1


@dataclass(frozen=True)
class ExecutionPlan:
    """A complete runnable configuration.

    ``layer_assignment`` holds, per pipeline, per stage, a half-open
    ``(start, end)`` layer interval. ``batch_assignment`` is the per-pipeline
    micro-batch count. ``failure_distribution`` counts failed nodes per stage
    index and is meaningful only under ``Policy.DATA_REROUTING``.
    """

    policy: Policy
    parallel: ParallelConfig
    layer_assignment: tuple[tuple[tuple[int, int], ...], ...]
    batch_assignment: tuple[int, ...]
    failure_distribution: tuple[int, ...] = ()

    def slots(self) -> list[tuple[int, int]]:
        """(pipeline, stage) coordinates in canonical row-major order."""
        return [
            (p, s)
            for p in range(self.parallel.dp_degree)
            for s in range(self.parallel.stage_counts[p])
        ]

    def slot_layers(self, pipeline: int, stage: int) -> frozenset[int]:
        start, end = self.layer_assignment[pipeline][stage]
        return frozenset(range(start, end))

    def stage_layer_counts(self, pipeline: int) -> tuple[int, ...]:
        return tuple(end - start for start, end in self.layer_assignment[pipeline])


@dataclass(frozen=True)
class FailedNode:
    """A failed node and the (pipeline, stage) slot it held when it died."""

    node_id: int
    pipeline: int
    stage: int


@dataclass(frozen=True)
class ClusterState:
    """Inventory of nodes plus the currently running plan."""

    total_nodes: int
    failed_nodes: tuple[FailedNode, ...]
    current_plan: ExecutionPlan
    global_batch_size: int
    micro_batch_size: int

    @property
    def surviving_nodes(self) -> int:
        return self.total_nodes - len(self.failed_nodes)

    @property
    def n_micro(self) -> int:
        """Global micro-batch count; caller must ensure divisibility."""
        return self.global_batch_size // self.micro_batch_size


def validate_plan(plan: ExecutionPlan, state: ClusterState, profile: Profile) -> list[str]:
    """Check every plan/state invariant; violations are returned as data.

    Total over all structurally well-typed inputs: malformed values yield
    violations instead of exceptions.
    """
    out: list[str] = []
    par = plan.parallel
    dp = par.dp_degree

    if dp < 1:
        out.append(f"dp_degree must be >= 1, got {dp}")
    if len(par.stage_counts) != dp:
        out.append(
            f"stage_counts has {len(par.stage_counts)} entries, expected dp_degree={dp}"
        )
    for p, count in enumerate(par.stage_counts):
        if count < 1:
            out.append(f"pipeline {p} has stage count {count}, must be >= 1")

    if len(state.failed_nodes) >= state.total_nodes:
        out.append(
            f"{len(state.failed_nodes)} failed of {state.total_nodes} total nodes; "
            "at least one node must survive"
        )
    # A rerouting plan keeps its full shape with failed slots holding no
    # node; the currently running plan likewise lost the failed slots. A
    # fresh candidate plan must fit entirely onto surviving nodes.
    occupied = par.n_nodes
    if plan.policy is Policy.DATA_REROUTING:
        occupied -= sum(plan.failure_distribution)
    elif plan == state.current_plan:
        occupied -= sum(
            1
            for f in state.failed_nodes
            if 0 <= f.pipeline < len(par.stage_counts)
            and 0 <= f.stage < par.stage_counts[f.pipeline]
        )
    if occupied > state.surviving_nodes:
        out.append(
            f"plan occupies {occupied} live nodes but only "
            f"{state.surviving_nodes} survive"
        )

    if state.micro_batch_size < 1 or state.global_batch_size < 1:
        out.append("batch sizes must be positive")
        n_micro = 0
    elif state.global_batch_size % state.micro_batch_size != 0:
        out.append(
            f"global_batch_size {state.global_batch_size} is not a multiple of "
            f"micro_batch_size {state.micro_batch_size}"
        )
        n_micro = 0
    else:
        n_micro = state.n_micro

    # Layer intervals: contiguous, ordered, covering [0, num_layers) per pipeline.
    if len(plan.layer_assignment) != dp:
        out.append(
            f"layer_assignment covers {len(plan.layer_assignment)} pipelines, "
            f"expected {dp}"
        )
    for p, intervals in enumerate(plan.layer_assignment):
        if p < len(par.stage_counts) and len(intervals) != par.stage_counts[p]:
            out.append(
                f"pipeline {p} has {len(intervals)} layer intervals, expected "
                f"{par.stage_counts[p]} stages"
            )
            continue
        cursor = 0
        ok = True
        for s, (start, end) in enumerate(intervals):
            if start != cursor or end <= start:
                out.append(
                    f"pipeline {p} stage {s} interval [{start}, {end}) is not a "
                    f"non-empty contiguous continuation of [0, {cursor})"
                )
                ok = False
                break
            cursor = end
        if ok and cursor != profile.num_layers:
            out.append(
                f"pipeline {p} layer intervals cover [0, {cursor}), expected "
                f"[0, {profile.num_layers})"
            )

    # Batch distribution.
    if len(plan.batch_assignment) != dp:
        out.append(
            f"batch_assignment has {len(plan.batch_assignment)} entries, expected {dp}"
        )
    else:
        total = sum(plan.batch_assignment)
        if n_micro and total != n_micro:
            out.append(
                f"batch_assignment sums to {total}, expected global micro-batch "
                f"count {n_micro}"
            )
        if any(b < 0 for b in plan.batch_assignment):
            out.append("batch_assignment entries must be non-negative")
        if n_micro >= dp and any(b == 0 for b in plan.batch_assignment):
            idle = [p for p, b in enumerate(plan.batch_assignment) if b == 0]
            out.append(
                f"pipelines {idle} receive zero micro-batches although "
                f"{n_micro} >= dp_degree={dp}"
            )

    # Failure distribution (rerouting only).
    if plan.policy is Policy.DATA_REROUTING:
        if not par.is_symmetric:
            out.append(
                "data rerouting requires a symmetric shape; stage counts are "
                f"{list(par.stage_counts)}"
            )
        n_stages = par.stage_counts[0] if par.stage_counts else 0
        if len(plan.failure_distribution) != n_stages:
            out.append(
                f"failure_distribution has {len(plan.failure_distribution)} entries, "
                f"expected one per stage ({n_stages})"
            )
        for s, f_count in enumerate(plan.failure_distribution):
            if f_count < 0:
                out.append(f"failure_distribution[{s}] must be non-negative")
            elif f_count >= dp:
                out.append(
                    f"stage {s} has {f_count} failures out of {dp} data-parallel "
                    "peers; no survivor remains to reroute to"
                )
    return out


# ---------------------------------------------------------------------------
# JSON codecs. Documents mirror the dataclasses one-to-one with snake_case
# keys; unknown keys are rejected. encode/decode round-trips bit-exactly.
# ---------------------------------------------------------------------------

_PROFILE_INT_FIELDS = {
    "mem_params_per_layer",
    "mem_optimizer_per_layer",
    "mem_grads_per_layer",
    "mem_activation_per_layer_per_microbatch",
    "weight_bytes_per_layer",
    "device_memory_limit",
    "num_layers",
}


def _require_keys(doc: dict, required: set[str], what: str) -> None:
    if not isinstance(doc, dict):
        raise SchemaError(f"{what} must be a JSON object")
    unknown = set(doc) - required
    if unknown:
        raise SchemaError(f"{what} has unknown keys: {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise SchemaError(f"{what} is missing keys: {sorted(missing)}")


def profile_to_dict(profile: Profile) -> dict:
    return {f.name: getattr(profile, f.name) for f in fields(Profile)}


def profile_from_dict(doc: dict) -> Profile:
    names = {f.name for f in fields(Profile)}
    _require_keys(doc, names, "profile")
    kwargs = {}
    for name in names:
        value = doc[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"profile.{name} must be a number, got {value!r}")
        if name in _PROFILE_INT_FIELDS:
            if not isinstance(value, int):
                raise SchemaError(f"profile.{name} must be an integer byte/count value")
            kwargs[name] = value
        else:
            kwargs[name] = float(value)
    profile = Profile(**kwargs)
    problems = profile.validate()
    if problems:
        raise SchemaError("; ".join(problems))
    return profile


def plan_to_dict(plan: ExecutionPlan) -> dict:
    return {
        "policy": plan.policy.value,
        "parallel": {
            "dp_degree": plan.parallel.dp_degree,
            "stage_counts": list(plan.parallel.stage_counts),
        },
        "layer_assignment": [
            [[start, end] for start, end in pipeline]
            for pipeline in plan.layer_assignment
        ],
        "batch_assignment": list(plan.batch_assignment),
        "failure_distribution": list(plan.failure_distribution),
    }


def plan_from_dict(doc: dict) -> ExecutionPlan:
    _require_keys(
        doc,
        {"policy", "parallel", "layer_assignment", "batch_assignment", "failure_distribution"},
        "plan",
    )
    try:
        policy = Policy(doc["policy"])
    except ValueError:
        raise SchemaError(
            f"plan.policy must be one of {[p.value for p in Policy]}, got {doc['policy']!r}"
        ) from None
    par = doc["parallel"]
    _require_keys(par, {"dp_degree", "stage_counts"}, "plan.parallel")
    if not isinstance(par["dp_degree"], int):
        raise SchemaError("plan.parallel.dp_degree must be an integer")
    if not isinstance(par["stage_counts"], list) or not all(
        isinstance(c, int) for c in par["stage_counts"]
    ):
        raise SchemaError("plan.parallel.stage_counts must be a list of integers")
    layers = doc["layer_assignment"]
    try:
        layer_assignment = tuple(
            tuple((int(start), int(end)) for start, end in pipeline) for pipeline in layers
        )
    except (TypeError, ValueError):
        raise SchemaError("plan.layer_assignment must be [[ [start, end], ... ], ...]") from None
    for key in ("batch_assignment", "failure_distribution"):
        if not isinstance(doc[key], list) or not all(
            isinstance(v, int) for v in doc[key]
        ):
            raise SchemaError(f"plan.{key} must be a list of integers")
    return ExecutionPlan(
        policy=policy,
        parallel=ParallelConfig(int(par["dp_degree"]), tuple(par["stage_counts"])),
        layer_assignment=layer_assignment,
        batch_assignment=tuple(doc["batch_assignment"]),
        failure_distribution=tuple(doc["failure_distribution"]),
    )


def state_to_dict(state: ClusterState) -> dict:
    return {
        "total_nodes": state.total_nodes,
        "failed_nodes": [
            {"node_id": n.node_id, "pipeline": n.pipeline, "stage": n.stage}
            for n in state.failed_nodes
        ],
        "current_plan": plan_to_dict(state.current_plan),
        "global_batch_size": state.global_batch_size,
        "micro_batch_size": state.micro_batch_size,
    }


def state_from_dict(doc: dict) -> ClusterState:
    _require_keys(
        doc,
        {"total_nodes", "failed_nodes", "current_plan", "global_batch_size", "micro_batch_size"},
        "state",
    )
    failed = []
    for item in doc["failed_nodes"]:
        _require_keys(item, {"node_id", "pipeline", "stage"}, "state.failed_nodes[*]")
        if not all(isinstance(item[k], int) for k in ("node_id", "pipeline", "stage")):
            raise SchemaError("state.failed_nodes entries must be integers")
        failed.append(FailedNode(item["node_id"], item["pipeline"], item["stage"]))
    for key in ("total_nodes", "global_batch_size", "micro_batch_size"):
        if not isinstance(doc[key], int):
            raise SchemaError(f"state.{key} must be an integer")
    return ClusterState(
        total_nodes=doc["total_nodes"],
        failed_nodes=tuple(failed),
        current_plan=plan_from_dict(doc["current_plan"]),
        global_batch_size=doc["global_batch_size"],
        micro_batch_size=doc["micro_batch_size"],
    )


def dumps_canonical(doc: dict) -> str:
    """Serialize deterministically: sorted keys, fixed layout, trailing newline."""
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def loads_document(text: str, what: str = "document") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{what} must be a JSON object")
    return doc
