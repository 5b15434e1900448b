"""Pure-Python 1F1B pipeline timing kernel.

Reference implementation of the compiled twin in ``_pipeline_c.pyx``; both
perform float operations in the identical order, so results are bit-equal.

Stage ``s`` runs ``min(n_stages - s, n_micro)`` warm-up forwards, then
(backward, forward) pairs until forwards run out, then drains backwards.
A computation starts at the max of (a) the end of the previous computation
on the same stage and (b) the end of the computation it depends on:
forward j depends on forward j one stage earlier; backward j depends on
backward j one stage later, except on the last stage where it depends on
that stage's own forward j.
"""

from __future__ import annotations


def op_at(stage: int, k: int, n_stages: int, n_micro: int) -> tuple[bool, int]:
    """k-th computation of a stage as (is_forward, microbatch_index)."""
    warm = n_stages - stage
    if warm > n_micro:
        warm = n_micro
    if k < warm:
        return True, k
    paired = n_micro - warm
    r = k - warm
    if r < 2 * paired:
        pair, phase = divmod(r, 2)
        if phase == 0:
            return False, pair
        return True, warm + pair
    return False, paired + (r - 2 * paired)


def simulate(t_f, t_b, n_micro, f_start, f_end, b_start, b_end):
    """Fill per-stage start/end tables ((n_stages, n_micro) each); return makespan."""
    n_stages = len(t_f)
    total = 2 * n_micro
    idx = [0] * n_stages
    clock = [0.0] * n_stages
    fwd_done = [0] * n_stages
    bwd_done = [0] * n_stages
    remaining = n_stages * total
    while remaining:
        progressed = False
        for s in range(n_stages):
            while idx[s] < total:
                is_fwd, j = op_at(s, idx[s], n_stages, n_micro)
                if is_fwd:
                    if s > 0:
                        if fwd_done[s - 1] <= j:
                            break
                        dep = f_end[s - 1][j]
                    else:
                        dep = 0.0
                    start = clock[s] if clock[s] >= dep else dep
                    end = start + t_f[s]
                    f_start[s][j] = start
                    f_end[s][j] = end
                    fwd_done[s] += 1
                else:
                    if s == n_stages - 1:
                        if fwd_done[s] <= j:
                            break
                        dep = f_end[s][j]
                    else:
                        if bwd_done[s + 1] <= j:
                            break
                        dep = b_end[s + 1][j]
                    start = clock[s] if clock[s] >= dep else dep
                    end = start + t_b[s]
                    b_start[s][j] = start
                    b_end[s][j] = end
                    bwd_done[s] += 1
                clock[s] = end
                idx[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("1F1B schedule deadlocked; dependency rule violated")
    makespan = 0.0
    for s in range(n_stages):
        if clock[s] > makespan:
            makespan = clock[s]
    return makespan


def makespan(t_f, t_b, n_micro):
    """Makespan only; avoids caller-visible tables on the search hot path."""
    n_stages = len(t_f)
    # start/end tables may alias: end is written after start and only end
    # values are ever read back as dependencies.
    f_end = [[0.0] * n_micro for _ in range(n_stages)]
    b_end = [[0.0] * n_micro for _ in range(n_stages)]
    return simulate(t_f, t_b, n_micro, f_end, f_end, b_end, b_end)
