import pytest

from odyssey.domain import (
    ClusterState,
    ExecutionPlan,
    ParallelConfig,
    Policy,
    Profile,
)

GIB = 2**30


def make_profile(**overrides) -> Profile:
    """Roomy default profile; tests override single knobs."""
    values = dict(
        t_forward_per_layer=0.01,
        t_backward_per_layer=0.02,
        mem_params_per_layer=GIB // 2,
        mem_optimizer_per_layer=GIB,
        mem_grads_per_layer=GIB // 2,
        mem_activation_per_layer_per_microbatch=GIB // 4,
        weight_bytes_per_layer=GIB // 2,
        link_bandwidth=25.0 * GIB,
        allreduce_time_per_layer=0.005,
        restart_overhead=10.0,
        device_memory_limit=64 * GIB,
        num_layers=8,
    )
    values.update(overrides)
    return Profile(**values)


def symmetric_plan(
    dp: int,
    pp: int,
    num_layers: int,
    batches,
    policy: Policy = Policy.DYNAMIC_PARALLELISM,
    failures=(),
) -> ExecutionPlan:
    """Even layer split (leftover layers go to the earliest stages)."""
    base, rem = divmod(num_layers, pp)
    intervals = []
    cursor = 0
    for s in range(pp):
        size = base + (1 if s < rem else 0)
        intervals.append((cursor, cursor + size))
        cursor += size
    return ExecutionPlan(
        policy=policy,
        parallel=ParallelConfig(dp, tuple([pp] * dp)),
        layer_assignment=tuple([tuple(intervals)] * dp),
        batch_assignment=tuple(batches),
        failure_distribution=tuple(failures),
    )


@pytest.fixture
def profile() -> Profile:
    return make_profile()


@pytest.fixture
def base_state(profile) -> ClusterState:
    plan = symmetric_plan(2, 2, profile.num_layers, [4, 4])
    return ClusterState(
        total_nodes=4,
        failed_nodes=(),
        current_plan=plan,
        global_batch_size=8,
        micro_batch_size=1,
    )
