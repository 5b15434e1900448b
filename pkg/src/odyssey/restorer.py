"""Reconfiguration helpers: weight-transfer assignment and sync scheduling.

Two independent optimizations run when the cluster changes shape:

* Moving weights to match a new plan is a minimum-cost bipartite assignment
  between surviving nodes and the slots of the new plan, where the cost of
  putting node ``i`` into slot ``j`` is the number of layers the node would
  have to download (layers it already holds are free, discards are free).

* After an asymmetric reshape, gradient synchronization groups for different
  layers can share devices, forcing those AllReduces to run serially. Layers
  become vertices of a conflict graph (edge = co-located on some device) and
  a greedy coloring packs non-conflicting layers into parallel rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .domain import ExecutionPlan, InfeasibleError, Profile


@dataclass(frozen=True)
class CostMatrix:
    """Layer-download cost of placing each surviving node into each new slot.

    Columns beyond ``real_slots`` are zero-cost padding so the matrix stays
    square when the new plan leaves some survivors idle.
    """

    n: int
    cost: tuple[tuple[int, ...], ...]
    node_layers: tuple[frozenset[int], ...]
    slot_layers: tuple[frozenset[int], ...]
    real_slots: int


@dataclass(frozen=True)
class TransferAssignment:
    """A node-to-slot permutation plus the downloads it implies."""

    node_to_slot: tuple[int, ...]
    total_cost_layers: int
    received_layers: tuple[tuple[int, ...], ...]
    transfer_seconds: float | None = None


@dataclass(frozen=True)
class ConflictGraph:
    """Layers as vertices; an edge joins layers co-located on some device."""

    n_layers: int
    edges: frozenset[tuple[int, int]]

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n_layers)]
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return adj

    def max_degree(self) -> int:
        if not self.edges:
            return 0
        return max(len(neighbors) for neighbors in self.adjacency())


@dataclass(frozen=True)
class CommSchedule:
    """Layer-to-round assignment; same-round layers synchronize in parallel."""

    layer_rounds: tuple[int, ...]
    num_rounds: int
    rounds: tuple[tuple[int, ...], ...]


def build_cost_matrix(
    old_plan: ExecutionPlan,
    old_node_layers: list[frozenset[int]],
    new_plan: ExecutionPlan,
) -> CostMatrix:
    """Cost matrix between surviving nodes (rows) and new-plan slots (columns).

    ``old_node_layers[i]`` is the layer set survivor ``i`` currently holds
    under ``old_plan``. Entry ``[i][j]`` counts the layers of new slot ``j``
    absent from node ``i``; discarded layers cost nothing.
    """
    n = len(old_node_layers)
    slots = [new_plan.slot_layers(p, s) for p, s in new_plan.slots()]
    if len(slots) > n:
        raise ValueError(
            f"new plan occupies {len(slots)} slots but only {n} nodes survive"
        )
    real = len(slots)
    slots.extend(frozenset() for _ in range(n - real))
    held = [frozenset(layers) for layers in old_node_layers]
    cost = tuple(
        tuple(len(slot - node) for slot in slots) for node in held
    )
    return CostMatrix(n=n, cost=cost, node_layers=tuple(held), slot_layers=tuple(slots), real_slots=real)


def _assignment_total(cost: np.ndarray) -> int:
    rows, cols = linear_sum_assignment(cost)
    return int(cost[rows, cols].sum())


def min_cost_assignment(m: CostMatrix) -> TransferAssignment:
    """Minimum-total-cost node-to-slot permutation.

    Among all minimizers the lexicographically smallest permutation is
    returned, fixing one deterministic answer regardless of solver internals:
    row 0 takes the smallest column that still admits an optimal completion,
    then row 1, and so on. Costs are integer layer counts, so the optimality
    checks are exact.
    """
    cost = np.asarray(m.cost, dtype=np.int64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    n = cost.shape[0]
    remaining_cols = list(range(n))
    target = _assignment_total(cost)
    total = target
    perm: list[int] = []
    for i in range(n):
        for pos, j in enumerate(remaining_cols):
            rest = target - int(cost[i, j])
            if rest < 0:
                continue
            if i == n - 1:
                feasible = rest == 0
            else:
                cols = remaining_cols[:pos] + remaining_cols[pos + 1 :]
                feasible = _assignment_total(cost[np.ix_(range(i + 1, n), cols)]) == rest
            if feasible:
                perm.append(j)
                remaining_cols.pop(pos)
                target = rest
                break
        else:
            raise RuntimeError("assignment refinement failed to extend a prefix")
    received = tuple(
        tuple(sorted(m.slot_layers[perm[i]] - m.node_layers[i])) for i in range(n)
    )
    return TransferAssignment(
        node_to_slot=tuple(perm),
        total_cost_layers=total,
        received_layers=received,
    )


def transfer_time(a: TransferAssignment, profile: Profile) -> float:
    """Seconds to complete all downloads.

    Distinct receivers download concurrently at full link bandwidth and a
    receiver's own downloads serialize, so the bound is the busiest receiver.
    """
    worst = max((len(layers) for layers in a.received_layers), default=0)
    return worst * profile.weight_bytes_per_layer / profile.link_bandwidth


def assign_transfer_sources(
    m: CostMatrix, a: TransferAssignment
) -> tuple[tuple[tuple[int, int], ...], ...]:
    """Pick a sender for every downloaded layer, per receiving node.

    Returns, per node, ``(layer, source_node)`` pairs. Senders must currently
    hold the layer; ties go to the node with the fewest outbound layers so
    far, then the lowest node index.
    """
    outbound = [0] * m.n
    result = []
    for node, layers in enumerate(a.received_layers):
        picks = []
        for layer in layers:
            holders = [i for i in range(m.n) if i != node and layer in m.node_layers[i]]
            if not holders:
                raise InfeasibleError(
                    f"layer {layer} is not held by any surviving node; "
                    "weights cannot be restored"
                )
            source = min(holders, key=lambda i: (outbound[i], i))
            outbound[source] += 1
            picks.append((layer, source))
        result.append(tuple(picks))
    return tuple(result)


def build_conflict_graph(plan: ExecutionPlan) -> ConflictGraph:
    """Conflict graph of the plan's layer synchronization groups."""
    n_layers = max(
        (end for pipeline in plan.layer_assignment for _, end in pipeline),
        default=0,
    )
    edges = set()
    for pipeline in plan.layer_assignment:
        for start, end in pipeline:
            for u in range(start, end):
                for v in range(u + 1, end):
                    edges.add((u, v))
    return ConflictGraph(n_layers=n_layers, edges=frozenset(edges))


def color_comm_rounds(g: ConflictGraph) -> CommSchedule:
    """Greedy sequential coloring in ascending layer order.

    Each layer takes the smallest round not used by an already-colored
    neighbor; the round count never exceeds max degree + 1.
    """
    adj = g.adjacency()
    rounds_of: list[int] = []
    for layer in range(g.n_layers):
        taken = {rounds_of[v] for v in adj[layer] if v < layer}
        color = 0
        while color in taken:
            color += 1
        rounds_of.append(color)
    num_rounds = max(rounds_of, default=-1) + 1
    grouped: list[list[int]] = [[] for _ in range(num_rounds)]
    for layer, color in enumerate(rounds_of):
        grouped[color].append(layer)
    return CommSchedule(
        layer_rounds=tuple(rounds_of),
        num_rounds=num_rounds,
        rounds=tuple(tuple(layers) for layers in grouped),
    )


def comm_time(s: CommSchedule, plan: ExecutionPlan, profile: Profile) -> float:
    """Total synchronization seconds: rounds run serially, layers within a
    round in parallel, so each round costs its slowest member."""
    total = 0.0
    for layers in s.rounds:
        if layers:
            total += max(profile.allreduce_time_per_layer for _ in layers)
    return total


def plan_sync_time(plan: ExecutionPlan, profile: Profile) -> tuple[int, float]:
    """(rounds, seconds) of gradient synchronization under the plan.

    A single pipeline has no data-parallel peers and synchronizes nothing.
    """
    if plan.parallel.dp_degree < 2:
        return 0, 0.0
    schedule = color_comm_rounds(build_conflict_graph(plan))
    return schedule.num_rounds, comm_time(schedule, plan, profile)
