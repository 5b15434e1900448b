"""Deterministic event-driven simulation of training under node failures.

Each node draws an exponential time-to-failure up front from the scenario
seed, so every policy replayed on the same seed observes the identical fault
sequence (common random numbers) and two runs of the same scenario are
bit-identical. Nodes are never repaired. Transitions between plans
contribute zero throughput for their duration; a fault arriving mid-
transition is handled when the transition completes.
"""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field, replace

from .domain import (
    ClusterState,
    ExecutionPlan,
    FailedNode,
    InfeasibleError,
    ParallelConfig,
    Policy,
    Profile,
    SchemaError,
    plan_to_dict,
    validate_plan,
)
from .estimator import memory_violations, plan_step_time, step_time_asymmetric
from .planner import (
    SearchConfig,
    build_rerouting_plan,
    canonical_plan_key,
    distribute_batch,
    get_execution_plan,
    select_policy,
    split_layers,
)
from .restorer import (
    assign_transfer_sources,
    build_cost_matrix,
    min_cost_assignment,
    transfer_time,
)

log = logging.getLogger("odyssey.simulator")

# Fixed stage-count templates for the reconfigure-only baseline.
TEMPLATE_STAGE_COUNTS = (2, 3, 4)


class SimPolicy(enum.Enum):
    ADAPTIVE = "adaptive"
    ALWAYS_REROUTE = "always_reroute"
    ALWAYS_RECONFIGURE = "always_reconfigure"


@dataclass(frozen=True)
class Scenario:
    """One simulated training run."""

    duration_seconds: float
    n_nodes_initial: int
    per_node_failure_rate: float  # failures per node per hour
    seed: int
    global_batch_size: int
    micro_batch_size: int
    policy: SimPolicy = SimPolicy.ADAPTIVE
    search: SearchConfig = field(default_factory=SearchConfig)

    def validate(self) -> list[str]:
        out = []
        if not self.duration_seconds > 0:
            out.append("duration_seconds must be positive")
        if self.n_nodes_initial < 1:
            out.append("n_nodes_initial must be >= 1")
        if self.per_node_failure_rate < 0:
            out.append("per_node_failure_rate must be non-negative")
        if self.global_batch_size < 1 or self.micro_batch_size < 1:
            out.append("batch sizes must be positive")
        elif self.global_batch_size % self.micro_batch_size != 0:
            out.append("global_batch_size must be a multiple of micro_batch_size")
        out.extend(self.search.validate())
        return out


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str  # "fault" | "plan_switch" | "interval_summary"
    payload: dict


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    throughput: float  # samples / second
    active_nodes: int
    label: str  # "running" | "transition" | "halted"

    @property
    def samples(self) -> float:
        return self.throughput * (self.end - self.start)


@dataclass(frozen=True)
class SimTrace:
    policy: SimPolicy
    seed: int
    events: tuple[SimEvent, ...]
    intervals: tuple[Interval, ...]
    total_samples: float
    total_seconds: float
    average_throughput: float


def draw_failure_schedule(
    seed: int, n_nodes: int, rate_per_hour: float
) -> list[tuple[float, int]]:
    """Per-node exponential failure times as sorted (seconds, node_id) pairs.

    Depends only on the seed, node count, and rate, never on policy state, so
    compared policies share one failure sequence.
    """
    if rate_per_hour <= 0:
        return []
    rng = random.Random(seed)
    rate_per_second = rate_per_hour / 3600.0
    times = [(rng.expovariate(rate_per_second), node) for node in range(n_nodes)]
    times.sort()
    return times


def _symmetric_plan(
    dp: int, pp: int, n_micro: int, profile: Profile
) -> ExecutionPlan | None:
    """Symmetric dp x pp plan, or None when layers or memory rule it out."""
    batches = distribute_batch(n_micro, [pp] * dp)
    try:
        layer_assignment = tuple(
            split_layers(pp, profile.num_layers, profile, max(1, batches[p]))
            for p in range(dp)
        )
    except InfeasibleError:
        return None
    return ExecutionPlan(
        policy=Policy.DYNAMIC_PARALLELISM,
        parallel=ParallelConfig(dp, tuple([pp] * dp)),
        layer_assignment=layer_assignment,
        batch_assignment=tuple(batches),
    )


def initial_plan(n_nodes: int, n_micro: int, profile: Profile) -> ExecutionPlan:
    """Best symmetric configuration using every provisioned node.

    Enumerates exact divisor pairs dp * pp = n_nodes and keeps the lowest
    estimated step time (ties: canonical encoding).
    """
    best: tuple[float, str, ExecutionPlan] | None = None
    for dp in range(1, n_nodes + 1):
        if n_nodes % dp:
            continue
        plan = _symmetric_plan(dp, n_nodes // dp, n_micro, profile)
        if plan is None:
            continue
        key = (step_time_asymmetric(plan, profile), canonical_plan_key(plan), plan)
        if best is None or key[:2] < best[:2]:
            best = key
    if best is None:
        raise InfeasibleError(
            f"no symmetric configuration of {n_nodes} nodes fits device memory"
        )
    return best[2]


def best_template_plan(
    available_nodes: int, n_micro: int, profile: Profile
) -> ExecutionPlan:
    """Best plan drawn from the fixed symmetric stage-count templates."""
    best: tuple[float, str, ExecutionPlan] | None = None
    for pp in TEMPLATE_STAGE_COUNTS:
        dp = available_nodes // pp
        if dp < 1:
            continue
        plan = _symmetric_plan(dp, pp, n_micro, profile)
        if plan is None:
            continue
        key = (step_time_asymmetric(plan, profile), canonical_plan_key(plan), plan)
        if best is None or key[:2] < best[:2]:
            best = key
    if best is None:
        raise InfeasibleError(
            f"no template configuration fits {available_nodes} nodes"
        )
    return best[2]


class _Cluster:
    """Mutable bookkeeping of one simulated run."""

    def __init__(self, scenario: Scenario, profile: Profile):
        n = scenario.n_nodes_initial
        n_micro = scenario.global_batch_size // scenario.micro_batch_size
        plan = initial_plan(n, n_micro, profile)
        self.profile = profile
        self.scenario = scenario
        self.alive: set[int] = set(range(n))
        self.slot_nodes: dict[tuple[int, int], int] = {
            slot: node for node, slot in enumerate(plan.slots())
        }
        self.node_layers: dict[int, frozenset[int]] = {
            node: plan.slot_layers(*slot) for slot, node in self.slot_nodes.items()
        }
        self.state = ClusterState(
            total_nodes=n,
            failed_nodes=(),
            current_plan=plan,
            global_batch_size=scenario.global_batch_size,
            micro_batch_size=scenario.micro_batch_size,
        )

    @property
    def plan(self) -> ExecutionPlan:
        return self.state.current_plan

    def survivor_rows(self) -> tuple[list[int], list[frozenset[int]]]:
        """Alive nodes as cost-matrix rows: plan slots row-major, then idle."""
        in_slots = [
            self.slot_nodes[slot] for slot in self.plan.slots() if slot in self.slot_nodes
        ]
        idle = sorted(self.alive - set(in_slots))
        nodes = in_slots + idle
        return nodes, [self.node_layers[n] for n in nodes]

    def record_fault(self, node: int) -> bool:
        """Mark a node dead; True when the running plan lost a slot."""
        self.alive.discard(node)
        self.node_layers.pop(node, None)
        slot = next((s for s, n in self.slot_nodes.items() if n == node), None)
        if slot is None:
            # Idle node: shrink the universe, the plan is untouched.
            self.state = replace(self.state, total_nodes=self.state.total_nodes - 1)
            return False
        del self.slot_nodes[slot]
        self.state = replace(
            self.state,
            failed_nodes=self.state.failed_nodes + (FailedNode(node, *slot),),
        )
        return True

    def apply_rerouting(self, plan: ExecutionPlan) -> None:
        self.state = replace(self.state, current_plan=plan)

    def apply_reconfiguration(self, plan: ExecutionPlan) -> float:
        """Move weights into the new plan's slots; returns transfer seconds."""
        rows_nodes, rows_layers = self.survivor_rows()
        matrix = build_cost_matrix(self.plan, rows_layers, plan)
        assignment = min_cost_assignment(matrix)
        assign_transfer_sources(matrix, assignment)  # raises when weights are lost
        seconds = transfer_time(assignment, self.profile)
        real_slots = plan.slots()
        self.slot_nodes = {}
        for row, slot_index in enumerate(assignment.node_to_slot):
            node = rows_nodes[row]
            if slot_index < len(real_slots):
                slot = real_slots[slot_index]
                self.slot_nodes[slot] = node
                self.node_layers[node] = plan.slot_layers(*slot)
            # Idle rows keep their stale layers as future transfer sources.
        self.state = ClusterState(
            total_nodes=len(self.alive),
            failed_nodes=(),
            current_plan=plan,
            global_batch_size=self.state.global_batch_size,
            micro_batch_size=self.state.micro_batch_size,
        )
        return seconds


def _check_active_plan(plan: ExecutionPlan, state: ClusterState, profile: Profile) -> None:
    problems = validate_plan(plan, state, profile) + memory_violations(plan, profile)
    if problems:
        raise RuntimeError(
            "simulation produced an invalid active plan: " + "; ".join(problems)
        )


def run_simulation(scenario: Scenario, profile: Profile) -> SimTrace:
    """Simulate one policy for the scenario's duration.

    On every fault of an in-plan node the policy picks the next plan:
    adaptive weighs rerouting against the best reconfiguration, the
    reroute-only baseline reroutes until a stage has no surviving peer (then
    reconfigures), and the reconfigure-only baseline re-plans from fixed
    symmetric templates paying transfer plus restart every time.
    """
    problems = scenario.validate()
    if problems:
        raise SchemaError("; ".join(problems))
    duration = scenario.duration_seconds
    rate_s = scenario.per_node_failure_rate / 3600.0
    cluster = _Cluster(scenario, profile)
    _check_active_plan(cluster.plan, cluster.state, profile)

    events: list[SimEvent] = []
    intervals: list[Interval] = []
    cursor = 0.0
    step_seconds = plan_step_time(cluster.plan, profile)
    throughput = scenario.global_batch_size / step_seconds
    halted = False

    def close_interval(end: float, label: str, rate: float) -> None:
        nonlocal cursor
        end = min(end, duration)
        if end > cursor:
            intervals.append(
                Interval(cursor, end, rate, len(cluster.alive), label)
            )
            events.append(
                SimEvent(
                    time=end,
                    kind="interval_summary",
                    payload={
                        "start": cursor,
                        "end": end,
                        "throughput": rate,
                        "samples": rate * (end - cursor),
                        "active_nodes": len(cluster.alive),
                        "label": label,
                    },
                )
            )
            cursor = end

    events.append(
        SimEvent(
            time=0.0,
            kind="plan_switch",
            payload={
                "plan": plan_to_dict(cluster.plan),
                "step_seconds": step_seconds,
                "transition_seconds": 0.0,
                "reason": "initial",
            },
        )
    )

    for fault_time, node in draw_failure_schedule(
        scenario.seed, scenario.n_nodes_initial, scenario.per_node_failure_rate
    ):
        if fault_time >= duration or halted:
            break
        # Faults landing inside a transition take effect when it completes.
        handle_at = max(fault_time, cursor)
        events.append(
            SimEvent(
                time=fault_time,
                kind="fault",
                payload={"node": node, "active_nodes": len(cluster.alive) - 1},
            )
        )
        if handle_at < duration:
            close_interval(handle_at, "running", throughput)
        in_plan = cluster.record_fault(node)
        log.debug(
            "%s seed %d: node %d failed at %.1fs (%d alive, in_plan=%s)",
            scenario.policy.value, scenario.seed, node, fault_time,
            len(cluster.alive), in_plan,
        )
        if not cluster.alive:
            halted = True
            break
        if not in_plan or handle_at >= duration:
            continue

        try:
            new_plan, transition = _decide(cluster, scenario, rate_s)
        except InfeasibleError as exc:
            events.append(
                SimEvent(time=handle_at, kind="plan_switch",
                         payload={"reason": f"unrecoverable: {exc}"})
            )
            halted = True
            break
        _check_active_plan(new_plan, cluster.state, profile)
        step_seconds = plan_step_time(new_plan, profile)
        throughput = scenario.global_batch_size / step_seconds
        events.append(
            SimEvent(
                time=handle_at,
                kind="plan_switch",
                payload={
                    "plan": plan_to_dict(new_plan),
                    "step_seconds": step_seconds,
                    "transition_seconds": transition,
                    "reason": new_plan.policy.value,
                },
            )
        )
        if transition > 0:
            close_interval(handle_at + transition, "transition", 0.0)

    if halted:
        close_interval(duration, "halted", 0.0)
    else:
        close_interval(duration, "running", throughput)

    # A fault logged mid-transition carries its true time, which precedes
    # already-emitted transition summaries; stable sort restores time order.
    events.sort(key=lambda e: e.time)
    total_samples = sum(i.samples for i in intervals)
    return SimTrace(
        policy=scenario.policy,
        seed=scenario.seed,
        events=tuple(events),
        intervals=tuple(intervals),
        total_samples=total_samples,
        total_seconds=duration,
        average_throughput=total_samples / duration,
    )


def _decide(
    cluster: _Cluster, scenario: Scenario, rate_s: float
) -> tuple[ExecutionPlan, float]:
    """Apply the scenario policy to the just-faulted cluster.

    Returns the new active plan and the transition seconds it cost.
    """
    profile = cluster.profile
    n_micro = cluster.state.n_micro
    _, row_layers = cluster.survivor_rows()

    if scenario.policy is SimPolicy.ADAPTIVE:
        residence = 1.0 / (rate_s * len(cluster.alive)) if rate_s > 0 else (
            scenario.search.expected_residence_seconds
        )
        cfg = replace(scenario.search, expected_residence_seconds=residence)
        decision = select_policy(cluster.state, profile, cfg, node_layers=row_layers)
        if decision.chosen.policy is Policy.DATA_REROUTING:
            cluster.apply_rerouting(decision.chosen)
            return decision.chosen, 0.0
        transfer = cluster.apply_reconfiguration(decision.chosen)
        return decision.chosen, transfer + profile.restart_overhead

    if scenario.policy is SimPolicy.ALWAYS_REROUTE:
        reroute = build_rerouting_plan(cluster.state)
        if reroute is not None and all(
            f < reroute.parallel.dp_degree for f in reroute.failure_distribution
        ):
            cluster.apply_rerouting(reroute)
            return reroute, 0.0
        # No surviving peer somewhere: reconfiguration is forced.
        plan = get_execution_plan(
            cluster.state, profile, scenario.search, node_layers=row_layers
        )
        transfer = cluster.apply_reconfiguration(plan)
        return plan, transfer + profile.restart_overhead

    plan = best_template_plan(len(cluster.alive), n_micro, profile)
    transfer = cluster.apply_reconfiguration(plan)
    return plan, transfer + profile.restart_overhead


def compare_policies(
    scenario: Scenario, profile: Profile, seeds: list[int]
) -> tuple[dict, dict[tuple[str, int], SimTrace]]:
    """Run all three policies per seed on identical failure sequences.

    Returns a summary document (per-policy average throughput and pairwise
    adaptive-versus-baseline ratios with min/mean/max over seeds) plus every
    trace keyed by (policy value, seed).
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    traces: dict[tuple[str, int], SimTrace] = {}
    averages: dict[str, list[float]] = {p.value: [] for p in SimPolicy}
    for seed in seeds:
        for policy in SimPolicy:
            trace = run_simulation(
                replace(scenario, policy=policy, seed=seed), profile
            )
            traces[(policy.value, seed)] = trace
            averages[policy.value].append(trace.average_throughput)

    def ratio_stats(num: list[float], den: list[float]) -> dict:
        per_seed = [n / d for n, d in zip(num, den)]
        return {
            "per_seed": per_seed,
            "min": min(per_seed),
            "mean": sum(per_seed) / len(per_seed),
            "max": max(per_seed),
        }

    adaptive = averages[SimPolicy.ADAPTIVE.value]
    summary = {
        "seeds": list(seeds),
        "per_policy": {
            name: {
                "average_throughput_per_seed": values,
                "mean_average_throughput": sum(values) / len(values),
            }
            for name, values in averages.items()
        },
        "ratios": {
            "adaptive_vs_always_reroute": ratio_stats(
                adaptive, averages[SimPolicy.ALWAYS_REROUTE.value]
            ),
            "adaptive_vs_always_reconfigure": ratio_stats(
                adaptive, averages[SimPolicy.ALWAYS_RECONFIGURE.value]
            ),
        },
    }
    return summary, traces


# ---------------------------------------------------------------------------
# Serialization of scenarios and traces.
# ---------------------------------------------------------------------------

def scenario_to_dict(scenario: Scenario) -> dict:
    doc = {
        "duration_seconds": scenario.duration_seconds,
        "n_nodes_initial": scenario.n_nodes_initial,
        "per_node_failure_rate": scenario.per_node_failure_rate,
        "seed": scenario.seed,
        "global_batch_size": scenario.global_batch_size,
        "micro_batch_size": scenario.micro_batch_size,
        "policy": scenario.policy.value,
        "search": {
            "expected_residence_seconds": scenario.search.expected_residence_seconds,
        },
    }
    if scenario.search.dp_range is not None:
        doc["search"]["dp_range"] = list(scenario.search.dp_range)
    if scenario.search.pp_range is not None:
        doc["search"]["pp_range"] = list(scenario.search.pp_range)
    if scenario.search.max_faults_lookahead is not None:
        doc["search"]["max_faults_lookahead"] = scenario.search.max_faults_lookahead
    return doc


def scenario_from_dict(doc: dict) -> Scenario:
    allowed = {
        "duration_seconds",
        "n_nodes_initial",
        "per_node_failure_rate",
        "seed",
        "global_batch_size",
        "micro_batch_size",
        "policy",
        "search",
    }
    required = allowed - {"policy", "search"}
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise SchemaError(f"scenario has unknown keys: {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise SchemaError(f"scenario is missing keys: {sorted(missing)}")
    for key in ("n_nodes_initial", "seed", "global_batch_size", "micro_batch_size"):
        if not isinstance(doc[key], int) or isinstance(doc[key], bool):
            raise SchemaError(f"scenario.{key} must be an integer")
    try:
        policy = SimPolicy(doc.get("policy", "adaptive"))
    except ValueError:
        raise SchemaError(
            f"scenario.policy must be one of {[p.value for p in SimPolicy]}"
        ) from None
    search_doc = doc.get("search", {})
    search_allowed = {
        "dp_range",
        "pp_range",
        "max_faults_lookahead",
        "expected_residence_seconds",
    }
    if not isinstance(search_doc, dict):
        raise SchemaError("scenario.search must be an object")
    unknown = set(search_doc) - search_allowed
    if unknown:
        raise SchemaError(f"scenario.search has unknown keys: {sorted(unknown)}")

    def as_range(value) -> tuple[int, int] | None:
        if value is None:
            return None
        if (
            not isinstance(value, list)
            or len(value) != 2
            or not all(isinstance(v, int) for v in value)
        ):
            raise SchemaError("search ranges must be [lo, hi] integer pairs")
        return (value[0], value[1])

    def as_seconds(value, what: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{what} must be a number, got {value!r}")
        return float(value)

    lookahead = search_doc.get("max_faults_lookahead")
    if lookahead is not None and not isinstance(lookahead, int):
        raise SchemaError("scenario.search.max_faults_lookahead must be an integer")
    search = SearchConfig(
        dp_range=as_range(search_doc.get("dp_range")),
        pp_range=as_range(search_doc.get("pp_range")),
        max_faults_lookahead=lookahead,
        expected_residence_seconds=as_seconds(
            search_doc.get("expected_residence_seconds", 3600.0),
            "scenario.search.expected_residence_seconds",
        ),
    )
    scenario = Scenario(
        duration_seconds=as_seconds(doc["duration_seconds"], "scenario.duration_seconds"),
        n_nodes_initial=doc["n_nodes_initial"],
        per_node_failure_rate=as_seconds(
            doc["per_node_failure_rate"], "scenario.per_node_failure_rate"
        ),
        seed=doc["seed"],
        global_batch_size=doc["global_batch_size"],
        micro_batch_size=doc["micro_batch_size"],
        policy=policy,
        search=search,
    )
    problems = scenario.validate()
    if problems:
        raise SchemaError("; ".join(problems))
    return scenario


def trace_csv_lines(trace: SimTrace) -> list[str]:
    """Fixed-column CSV: one row per interval, floats in repr form."""
    lines = ["time_seconds,active_nodes,throughput,policy_event"]
    for interval in trace.intervals:
        lines.append(
            f"{interval.start!r},{interval.active_nodes},"
            f"{interval.throughput!r},{interval.label}"
        )
    return lines
