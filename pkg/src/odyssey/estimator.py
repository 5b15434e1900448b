"""Per-step time and peak-memory prediction for candidate execution plans.

Symmetric pipelines have a closed-form step time; asymmetric ones are timed
by replaying the 1F1B schedule with the dependency-driven kernel. Rerouted
plans keep their original shape and pay a closed-form penalty per stage that
absorbed a failed peer's micro-batches. Every function here is pure, so the
planner can evaluate candidates concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from ._kernels import pipeline_makespan, pipeline_times
from ._kernels._pipeline_py import op_at
from .domain import ExecutionPlan, InfeasibleError, Policy, Profile
from .restorer import plan_sync_time


@dataclass(frozen=True)
class StageTimes:
    """Per-stage forward/backward seconds for one micro-batch."""

    forward_seconds: tuple[float, ...]
    backward_seconds: tuple[float, ...]

    @classmethod
    def from_layer_counts(cls, layer_counts: tuple[int, ...], profile: Profile) -> StageTimes:
        """Linear-in-layers model: a stage costs its layer count times the
        per-layer profile times."""
        return cls(
            forward_seconds=tuple(n * profile.t_forward_per_layer for n in layer_counts),
            backward_seconds=tuple(n * profile.t_backward_per_layer for n in layer_counts),
        )

    @property
    def n_stages(self) -> int:
        return len(self.forward_seconds)


@dataclass(frozen=True)
class Computation:
    kind: str  # "forward" | "backward"
    microbatch_index: int
    start_seconds: float
    end_seconds: float


@dataclass(frozen=True)
class ScheduleTrace:
    """Ordered per-stage computation records plus the overall makespan."""

    per_stage: tuple[tuple[Computation, ...], ...]
    makespan_seconds: float


def step_time_symmetric(n_stages: int, n_micro: int, t_f: float, t_b: float) -> float:
    """Closed-form 1F1B step time for uniform stages.

    The pipeline fills and drains through ``n_stages - 1`` extra slots around
    the ``n_micro`` steady-state slots, each slot costing one forward plus one
    backward.
    """
    if n_stages < 1 or n_micro < 1:
        raise ValueError(f"counts must be >= 1, got n_stages={n_stages}, n_micro={n_micro}")
    if t_f < 0 or t_b < 0:
        raise ValueError("stage times must be non-negative")
    return (n_stages + n_micro - 1) * (t_f + t_b)


def build_1f1b_schedule(n_stages: int, n_micro: int) -> list[list[tuple[str, int]]]:
    """Per-stage ordered operation list of the 1F1B schedule.

    Stage ``s`` runs ``min(n_stages - s, n_micro)`` warm-up forwards, then
    alternates one backward and one forward until forwards are exhausted,
    then drains the remaining backwards.
    """
    if n_stages < 1 or n_micro < 1:
        raise ValueError(f"counts must be >= 1, got n_stages={n_stages}, n_micro={n_micro}")
    schedule = []
    for s in range(n_stages):
        ops = []
        for k in range(2 * n_micro):
            is_fwd, j = op_at(s, k, n_stages, n_micro)
            ops.append(("forward" if is_fwd else "backward", j))
        schedule.append(ops)
    return schedule


def simulate_pipeline_1f1b(stage_times: StageTimes, n_micro: int) -> ScheduleTrace:
    """Replay the 1F1B schedule and time every computation.

    A computation starts at the later of its stage's previous computation and
    the computation it depends on (forward j upstream, backward j downstream,
    or the same stage's forward j on the last stage).
    """
    f_start, f_end, b_start, b_end, span = pipeline_times(
        stage_times.forward_seconds, stage_times.backward_seconds, n_micro
    )
    per_stage = []
    for s, ops in enumerate(build_1f1b_schedule(stage_times.n_stages, n_micro)):
        records = []
        for kind, j in ops:
            if kind == "forward":
                records.append(Computation(kind, j, float(f_start[s, j]), float(f_end[s, j])))
            else:
                records.append(Computation(kind, j, float(b_start[s, j]), float(b_end[s, j])))
        per_stage.append(tuple(records))
    return ScheduleTrace(per_stage=tuple(per_stage), makespan_seconds=span)


@lru_cache(maxsize=65536)
def _cached_makespan(layer_counts: tuple[int, ...], n_micro: int, profile: Profile) -> float:
    times = StageTimes.from_layer_counts(layer_counts, profile)
    return pipeline_makespan(times.forward_seconds, times.backward_seconds, n_micro)


def pipeline_step_seconds(layer_counts: tuple[int, ...], n_micro: int, profile: Profile) -> float:
    """Makespan of one pipeline; memoized since the planner re-times the same
    layer split for many candidate shapes. Zero micro-batches take no time."""
    if n_micro == 0:
        return 0.0
    return _cached_makespan(tuple(layer_counts), n_micro, profile)


def step_time_asymmetric(plan: ExecutionPlan, profile: Profile) -> float:
    """Step time of a (possibly asymmetric) multi-pipeline plan.

    Synchronous gradient updates make the slowest pipeline set the pace; the
    serialized synchronization rounds of the shape are added on top. With a
    single pipeline there is nothing to synchronize.
    """
    if plan.policy is not Policy.DYNAMIC_PARALLELISM:
        raise ValueError(f"expected a dynamic-parallelism plan, got {plan.policy}")
    slowest = max(
        pipeline_step_seconds(plan.stage_layer_counts(p), plan.batch_assignment[p], profile)
        for p in range(plan.parallel.dp_degree)
    )
    _, sync_seconds = plan_sync_time(plan, profile)
    return slowest + sync_seconds


def step_time_rerouting(plan: ExecutionPlan, profile: Profile) -> float:
    """Step time after rerouting failed nodes' micro-batches to their peers.

    Every stage with at least one failure stretches the steady state: its
    survivors each absorb ``n_micro * failed / (dp - failed)`` extra
    micro-batch slots. Stage time is the base plan's per-stage maximum of
    (forward + backward).
    """
    if plan.policy is not Policy.DATA_REROUTING:
        raise ValueError(f"expected a data-rerouting plan, got {plan.policy}")
    dp = plan.parallel.dp_degree
    if not plan.parallel.is_symmetric:
        raise InfeasibleError(
            "data rerouting requires equal stage counts across pipelines, got "
            f"{list(plan.parallel.stage_counts)}"
        )
    if len(plan.failure_distribution) != plan.parallel.stage_counts[0]:
        raise ValueError(
            f"failure_distribution has {len(plan.failure_distribution)} entries, "
            f"expected one per stage ({plan.parallel.stage_counts[0]})"
        )
    bad = [s for s, f in enumerate(plan.failure_distribution) if f >= dp]
    if bad:
        raise InfeasibleError(
            f"stages {bad} have no surviving data-parallel peer; "
            "rerouting cannot recover this state"
        )
    n_stages = plan.parallel.stage_counts[0]
    n_micro = max(plan.batch_assignment)
    stage_seconds = max(
        (end - start) * (profile.t_forward_per_layer + profile.t_backward_per_layer)
        for pipeline in plan.layer_assignment
        for start, end in pipeline
    )
    penalty = sum(
        n_micro * f / (dp - f) for f in plan.failure_distribution if f > 0
    )
    return (n_stages + n_micro - 1 + penalty) * stage_seconds


def peak_memory(stage_index: int, n_layers_in_stage: int, n_stages: int, profile: Profile) -> int:
    """Peak bytes of a stage during the steady state of the 1F1B pipeline.

    Static weights, optimizer state, and gradients scale with the layer
    count; activations additionally scale with the number of in-flight
    micro-batches, which is the stage's distance from the pipeline tail.
    """
    if not 0 <= stage_index < n_stages:
        raise ValueError(f"stage_index {stage_index} out of range [0, {n_stages})")
    if n_layers_in_stage < 1:
        raise ValueError(f"n_layers_in_stage must be >= 1, got {n_layers_in_stage}")
    static = n_layers_in_stage * (
        profile.mem_params_per_layer
        + profile.mem_optimizer_per_layer
        + profile.mem_grads_per_layer
    )
    in_flight = n_stages - stage_index
    dynamic = in_flight * n_layers_in_stage * profile.mem_activation_per_layer_per_microbatch
    return static + dynamic


def plan_peak_memory(plan: ExecutionPlan, profile: Profile) -> list[list[int]]:
    """Per-pipeline, per-stage peak-memory estimates in bytes."""
    report = []
    for p in range(plan.parallel.dp_degree):
        counts = plan.stage_layer_counts(p)
        n_stages = len(counts)
        report.append(
            [peak_memory(s, counts[s], n_stages, profile) for s in range(n_stages)]
        )
    return report


def memory_violations(plan: ExecutionPlan, profile: Profile) -> list[str]:
    """Stages whose peak estimate exceeds the device memory limit."""
    out = []
    for p, stages in enumerate(plan_peak_memory(plan, profile)):
        for s, total in enumerate(stages):
            if total > profile.device_memory_limit:
                out.append(
                    f"pipeline {p} stage {s} needs {total} bytes, limit is "
                    f"{profile.device_memory_limit}"
                )
    return out


def transition_time(
    old: ExecutionPlan, new: ExecutionPlan, profile: Profile, transfer_seconds: float
) -> float:
    """Wall-clock cost of switching plans.

    Rerouting keeps the configuration and costs nothing. A reconfiguration
    pays the weight transfer plus the fixed training restart; plan search is
    free because it overlaps with training.
    """
    if transfer_seconds < 0:
        raise ValueError("transfer_seconds must be non-negative")
    if new.policy is Policy.DATA_REROUTING:
        return 0.0
    return transfer_seconds + profile.restart_overhead


def plan_step_time(plan: ExecutionPlan, profile: Profile) -> float:
    """Step time under whichever policy the plan carries."""
    if plan.policy is Policy.DATA_REROUTING:
        return step_time_rerouting(plan, profile)
    return step_time_asymmetric(plan, profile)
