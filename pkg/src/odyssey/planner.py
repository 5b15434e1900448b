"""Execution-plan search and recovery-policy selection.

The search enumerates parallel shapes for the surviving nodes (data-parallel
degree and per-pipeline stage counts), balances micro-batches across
pipelines, splits layers within each pipeline under the memory cap, and keeps
the candidate with the lowest estimated step time. Policy selection then
weighs the best reconfiguration against simply rerouting the failed nodes'
work, maximizing effective throughput over the expected residence in the new
state: ``J = (batch / step_time) * residence / (transition + residence)``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache

from .domain import (
    ClusterState,
    ExecutionPlan,
    InfeasibleError,
    ParallelConfig,
    Policy,
    Profile,
    dumps_canonical,
    plan_to_dict,
    validate_plan,
)
from .estimator import (
    memory_violations,
    peak_memory,
    pipeline_step_seconds,
    step_time_asymmetric,
    step_time_rerouting,
    transition_time,
)
from .restorer import build_cost_matrix, min_cost_assignment, transfer_time

log = logging.getLogger("odyssey.planner")


@dataclass(frozen=True)
class SearchConfig:
    """Bounds of the plan search.

    ``None`` ranges derive from the running plan at search time: both the
    data-parallel degree and the stage count move at most 2 away from their
    current values. ``max_faults_lookahead`` defaults to the number of faults
    observed so far. ``expected_residence_seconds`` stands in for the unknown
    time until the next fault.
    """

    dp_range: tuple[int, int] | None = None
    pp_range: tuple[int, int] | None = None
    max_faults_lookahead: int | None = None
    expected_residence_seconds: float = 3600.0

    def validate(self) -> list[str]:
        out = []
        for name, rng in (("dp_range", self.dp_range), ("pp_range", self.pp_range)):
            if rng is None:
                continue
            lo, hi = rng
            if lo < 1 or hi < lo:
                out.append(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.max_faults_lookahead is not None and self.max_faults_lookahead < 1:
            out.append("max_faults_lookahead must be >= 1")
        if not self.expected_residence_seconds > 0:
            out.append("expected_residence_seconds must be positive")
        return out


@dataclass(frozen=True)
class PlanDecision:
    """Outcome of a policy selection."""

    chosen: ExecutionPlan
    objective_value: float
    rejected_alternatives: tuple[tuple[str, float], ...]
    estimated_step_seconds: float
    estimated_transition_seconds: float


def plan_summary(plan: ExecutionPlan) -> str:
    return (
        f"{plan.policy.value} dp={plan.parallel.dp_degree} "
        f"stages={list(plan.parallel.stage_counts)} "
        f"batches={list(plan.batch_assignment)}"
    )


def canonical_plan_key(plan: ExecutionPlan) -> str:
    return dumps_canonical(plan_to_dict(plan))


def integer_partition(
    n_nodes: int, dp: int, pp_range: tuple[int, int]
) -> list[tuple[int, ...]]:
    """Non-decreasing stage-count vectors of length ``dp`` summing to
    ``n_nodes`` with every entry inside ``pp_range``; empty when impossible."""
    if dp < 1:
        raise ValueError(f"dp must be >= 1, got {dp}")
    lo, hi = pp_range
    out: list[tuple[int, ...]] = []

    def extend(prefix: list[int], remaining: int, parts_left: int, minimum: int) -> None:
        if parts_left == 0:
            if remaining == 0:
                out.append(tuple(prefix))
            return
        for value in range(max(minimum, lo), hi + 1):
            rest = remaining - value
            # remaining parts must each be in [value, hi]
            if rest < value * (parts_left - 1):
                break
            if rest > hi * (parts_left - 1):
                continue
            prefix.append(value)
            extend(prefix, rest, parts_left - 1, value)
            prefix.pop()

    extend([], n_nodes, dp, lo)
    return out


def get_parallel_strategy(
    n_nodes: int,
    max_faults: int,
    dp_range: tuple[int, int],
    pp_range: tuple[int, int],
) -> list[tuple[int, tuple[int, ...]]]:
    """Candidate (dp_degree, stage_counts) shapes for 1..max_faults lost nodes.

    Deterministic order: fault count ascending, then dp, then partition.
    """
    if max_faults < 1:
        raise ValueError(f"max_faults must be >= 1, got {max_faults}")
    if n_nodes <= max_faults:
        raise ValueError(
            f"n_nodes ({n_nodes}) must exceed max_faults ({max_faults})"
        )
    seen: set[tuple[int, tuple[int, ...]]] = set()
    out: list[tuple[int, tuple[int, ...]]] = []
    for i in range(1, max_faults + 1):
        for dp in range(dp_range[0], dp_range[1] + 1):
            for partition in integer_partition(n_nodes - i, dp, pp_range):
                key = (dp, partition)
                if key not in seen:
                    seen.add(key)
                    out.append(key)
    return out


def distribute_batch(n_micro: int, stage_counts: list[int]) -> list[int]:
    """Load-balanced per-pipeline micro-batch counts.

    Pipelines pre-allocate proportionally to their node counts; leftovers go
    one at a time to the pipeline with the highest nodes-per-assigned ratio.
    When micro-batches suffice, empty pipelines are topped up from the largest
    allocation; with fewer micro-batches than pipelines some legitimately
    stay empty and the plan is degraded.
    """
    if n_micro < 1:
        raise ValueError(f"n_micro must be >= 1, got {n_micro}")
    total_nodes = sum(stage_counts)
    k = len(stage_counts)
    alloc = [n_micro * sc // total_nodes for sc in stage_counts]

    def pressure(p: int) -> float:
        return float("inf") if alloc[p] == 0 else stage_counts[p] / alloc[p]

    for _ in range(n_micro - sum(alloc)):
        best = max(range(k), key=lambda p: (pressure(p), -p))
        alloc[best] += 1
    if n_micro >= k:
        while any(a == 0 for a in alloc):
            empty = min(p for p in range(k) if alloc[p] == 0)
            donor = max(range(k), key=lambda p: (alloc[p], -p))
            if alloc[donor] <= 1:
                break
            alloc[donor] -= 1
            alloc[empty] += 1
    return alloc


@lru_cache(maxsize=65536)
def split_layers(
    stage_count: int, num_layers: int, profile: Profile, n_micro: int
) -> tuple[tuple[int, int], ...]:
    """Best contiguous layer intervals for one pipeline.

    Every stage gets ``num_layers // stage_count`` layers; each placement of
    the remainder (one extra layer per chosen stage) is checked against the
    memory cap and timed, keeping the placement with the lowest pipeline
    makespan (ties: lexicographically smallest interval vector).
    """
    if stage_count < 1 or n_micro < 1:
        raise ValueError("stage_count and n_micro must be >= 1")
    if num_layers < stage_count:
        raise InfeasibleError(
            f"{num_layers} layers cannot give each of {stage_count} stages a layer"
        )
    base, remainder = divmod(num_layers, stage_count)
    best: tuple[float, tuple[tuple[int, int], ...]] | None = None
    sample_overrun: tuple[int, int] | None = None  # (stage, bytes) for diagnostics
    for extra in itertools.combinations(range(stage_count), remainder):
        bonus = set(extra)
        counts = tuple(base + (1 if s in bonus else 0) for s in range(stage_count))
        overrun = None
        for s, n in enumerate(counts):
            need = peak_memory(s, n, stage_count, profile)
            if need > profile.device_memory_limit:
                overrun = (s, need)
                break
        if overrun is not None:
            if sample_overrun is None:
                sample_overrun = overrun
            continue
        intervals = []
        cursor = 0
        for n in counts:
            intervals.append((cursor, cursor + n))
            cursor += n
        key = (pipeline_step_seconds(counts, n_micro, profile), tuple(intervals))
        if best is None or key < best:
            best = key
    if best is None:
        stage, need = sample_overrun if sample_overrun else (0, 0)
        raise InfeasibleError(
            f"every placement of {num_layers} layers over {stage_count} stages "
            f"exceeds device memory (stage {stage} needs {need} bytes, limit "
            f"{profile.device_memory_limit})"
        )
    return best[1]


def _resolved_search(
    state: ClusterState, cfg: SearchConfig
) -> tuple[tuple[int, int], tuple[int, int], int]:
    current = state.current_plan.parallel
    if cfg.dp_range is not None:
        dp_range = cfg.dp_range
    else:
        # Span the +-2 neighborhoods of two anchors: the running dp and the
        # dp the survivors could still support at the current pipeline
        # depth. After a reconfiguration the anchors coincide; after a long
        # rerouting streak the second keeps shrinking clusters reachable.
        dp_now = current.dp_degree
        dp_fit = max(1, state.surviving_nodes // max(1, min(current.stage_counts)))
        dp_range = (max(1, min(dp_now, dp_fit) - 2), max(dp_now, dp_fit) + 2)
    pp_now = max(current.stage_counts)
    pp_range = cfg.pp_range or (max(1, pp_now - 2), pp_now + 2)
    max_faults = cfg.max_faults_lookahead or max(1, len(state.failed_nodes))
    return dp_range, pp_range, max_faults


def surviving_node_layers(state: ClusterState) -> list[frozenset[int]]:
    """Layer sets held by survivors, slot order first, then idle nodes.

    Nodes outside the current plan are assumed to hold nothing; the simulator
    passes their true holdings explicitly when it has them.
    """
    failed = {(f.pipeline, f.stage) for f in state.failed_nodes}
    plan = state.current_plan
    sets = [
        plan.slot_layers(p, s) for (p, s) in plan.slots() if (p, s) not in failed
    ]
    sets.extend([frozenset()] * (state.surviving_nodes - len(sets)))
    return sets


def estimate_transfer_seconds(
    state: ClusterState,
    new_plan: ExecutionPlan,
    profile: Profile,
    node_layers: list[frozenset[int]] | None = None,
) -> float:
    layers = node_layers if node_layers is not None else surviving_node_layers(state)
    matrix = build_cost_matrix(state.current_plan, layers, new_plan)
    return transfer_time(min_cost_assignment(matrix), profile)


def get_execution_plan(
    state: ClusterState,
    profile: Profile,
    cfg: SearchConfig,
    node_layers: list[frozenset[int]] | None = None,
) -> ExecutionPlan:
    """Lowest-step-time dynamic-parallelism plan over the search space.

    Candidates that need more nodes than survive, cannot hold the model, or
    violate the memory cap are discarded. Ties on step time break on
    transition (weight transfer) time, then on the canonical plan encoding,
    so the result is deterministic regardless of evaluation order.
    """
    if state.surviving_nodes < 1:
        raise InfeasibleError("no surviving node")
    problems = cfg.validate()
    if problems:
        raise ValueError("; ".join(problems))
    dp_range, pp_range, max_faults = _resolved_search(state, cfg)
    n_micro = state.n_micro
    evaluated: list[tuple[float, ExecutionPlan]] = []
    last_rejection: InfeasibleError | None = None
    for dp, stage_counts in get_parallel_strategy(
        state.total_nodes, max_faults, dp_range, pp_range
    ):
        if sum(stage_counts) > state.surviving_nodes:
            continue
        batches = distribute_batch(n_micro, list(stage_counts))
        try:
            layer_assignment = tuple(
                split_layers(sc, profile.num_layers, profile, max(1, batches[p]))
                for p, sc in enumerate(stage_counts)
            )
        except InfeasibleError as exc:
            last_rejection = exc
            continue
        plan = ExecutionPlan(
            policy=Policy.DYNAMIC_PARALLELISM,
            parallel=ParallelConfig(dp, stage_counts),
            layer_assignment=layer_assignment,
            batch_assignment=tuple(batches),
        )
        evaluated.append((step_time_asymmetric(plan, profile), plan))
    log.debug(
        "plan search: %d feasible candidates for %d survivors (dp %s, pp %s)",
        len(evaluated), state.surviving_nodes, dp_range, pp_range,
    )
    if not evaluated:
        detail = f"; last rejection: {last_rejection}" if last_rejection else ""
        raise InfeasibleError(
            "no memory-feasible execution plan exists for "
            f"{state.surviving_nodes} surviving nodes with dp_range={dp_range}, "
            f"pp_range={pp_range}{detail}"
        )
    best_step = min(step for step, _ in evaluated)
    tied = [plan for step, plan in evaluated if step == best_step]
    if len(tied) == 1:
        return tied[0]
    keyed = [
        (
            estimate_transfer_seconds(state, plan, profile, node_layers),
            canonical_plan_key(plan),
            plan,
        )
        for plan in tied
    ]
    keyed.sort(key=lambda item: (item[0], item[1]))
    return keyed[0][2]


def build_rerouting_plan(state: ClusterState) -> ExecutionPlan | None:
    """Current plan with failed work spread over surviving peers.

    Only symmetric shapes can reroute (every stage index must exist in every
    pipeline); returns None otherwise.
    """
    plan = state.current_plan
    if not plan.parallel.is_symmetric:
        return None
    n_stages = plan.parallel.stage_counts[0]
    failures = [0] * n_stages
    for f in state.failed_nodes:
        if not (0 <= f.stage < n_stages and 0 <= f.pipeline < plan.parallel.dp_degree):
            return None
        failures[f.stage] += 1
    return ExecutionPlan(
        policy=Policy.DATA_REROUTING,
        parallel=plan.parallel,
        layer_assignment=plan.layer_assignment,
        batch_assignment=plan.batch_assignment,
        failure_distribution=tuple(failures),
    )


def select_policy(
    state: ClusterState,
    profile: Profile,
    cfg: SearchConfig,
    node_layers: list[frozenset[int]] | None = None,
) -> PlanDecision:
    """Pick the recovery policy maximizing effective throughput.

    Rerouting keeps the shape and transitions for free; reconfiguration pays
    weight transfer plus restart but may reach a faster shape. When a stage
    has lost every data-parallel peer rerouting is impossible and
    reconfiguration is forced. Exact objective ties favor rerouting, the
    cheaper transition.
    """
    if not state.failed_nodes:
        raise ValueError("select_policy requires at least one observed fault")
    batch = state.global_batch_size
    residence = cfg.expected_residence_seconds
    # (J, preference, plan, step_seconds, transition_seconds)
    options: list[tuple[float, int, ExecutionPlan, float, float]] = []

    reroute = build_rerouting_plan(state)
    if reroute is not None:
        try:
            step = step_time_rerouting(reroute, profile)
        except InfeasibleError:
            pass
        else:
            invalid = validate_plan(reroute, state, profile) or memory_violations(
                reroute, profile
            )
            if not invalid:
                options.append(((batch / step), 0, reroute, step, 0.0))

    dynamic_error: InfeasibleError | None = None
    try:
        dynamic = get_execution_plan(state, profile, cfg, node_layers)
    except InfeasibleError as exc:
        dynamic_error = exc
    else:
        transfer = estimate_transfer_seconds(state, dynamic, profile, node_layers)
        trans = transition_time(state.current_plan, dynamic, profile, transfer)
        step = step_time_asymmetric(dynamic, profile)
        objective = (batch / step) * (residence / (trans + residence))
        options.append((objective, 1, dynamic, step, trans))

    if not options:
        detail = f" ({dynamic_error})" if dynamic_error else ""
        raise InfeasibleError(
            f"neither data rerouting nor dynamic parallelism is feasible{detail}"
        )
    options.sort(key=lambda o: (-o[0], o[1]))
    winner = options[0]
    log.info(
        "policy selection: %s (objective %.4f, step %.4fs, transition %.4fs)",
        winner[2].policy.value, winner[0], winner[3], winner[4],
    )
    rejected = tuple((plan_summary(o[2]), o[0]) for o in options[1:])
    decision = PlanDecision(
        chosen=winner[2],
        objective_value=winner[0],
        rejected_alternatives=rejected,
        estimated_step_seconds=winner[3],
        estimated_transition_seconds=winner[4],
    )
    chosen_violations = validate_plan(decision.chosen, state, profile)
    if chosen_violations or memory_violations(decision.chosen, profile):
        raise InfeasibleError(
            "selected plan failed final validation: "
            + "; ".join(chosen_violations + memory_violations(decision.chosen, profile))
        )
    return decision
