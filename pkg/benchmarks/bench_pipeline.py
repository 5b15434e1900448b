#!/usr/bin/env python3
"""Benchmark the 1F1B timing kernel: compiled extension vs pure Python.

The kernel is the planner's hot path (one call per layer-split candidate per
pipeline per plan candidate per fault). Run after building the extension:

    python3 benchmarks/bench_pipeline.py
"""

import os
import random
import subprocess
import sys
import timeit

import numpy as np

from odyssey._kernels import _pipeline_py

try:
    from odyssey._kernels import _pipeline_c
except ImportError:
    _pipeline_c = None

SIZES = [(2, 8), (4, 16), (8, 32), (8, 64), (16, 64), (32, 128)]

MACRO_SNIPPET = """
import time
from odyssey import KERNEL_IMPLEMENTATION
from odyssey.domain import Profile
from odyssey.simulator import Scenario, compare_policies
GIB = 2**30
profile = Profile(
    t_forward_per_layer=0.010, t_backward_per_layer=0.020,
    mem_params_per_layer=GIB//2, mem_optimizer_per_layer=GIB,
    mem_grads_per_layer=GIB//2, mem_activation_per_layer_per_microbatch=GIB//4,
    weight_bytes_per_layer=GIB//2, link_bandwidth=25.0*GIB,
    allreduce_time_per_layer=0.005, restart_overhead=10.0,
    device_memory_limit=64*GIB, num_layers=32)
scenario = Scenario(duration_seconds=9*3600.0, n_nodes_initial=32,
                    per_node_failure_rate=0.1, seed=0,
                    global_batch_size=64, micro_batch_size=1)
start = time.perf_counter()
compare_policies(scenario, profile, list(range(3)))
print(f"{KERNEL_IMPLEMENTATION}: {time.perf_counter() - start:.2f}s")
"""


def bench(fn, number):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number


def main():
    rng = random.Random(7)
    print("kernel micro-benchmark (single makespan evaluation)")
    print(f"{'stages x micro':>16} {'pure (us)':>12} {'compiled (us)':>14} {'speedup':>9}")
    for n_stages, n_micro in SIZES:
        t_f = [rng.uniform(0.01, 0.2) for _ in range(n_stages)]
        t_b = [rng.uniform(0.01, 0.4) for _ in range(n_stages)]
        number = max(20, 20000 // (n_stages * n_micro))
        pure = bench(lambda: _pipeline_py.makespan(t_f, t_b, n_micro), number)
        row = f"{n_stages:>9}x{n_micro:<6} {pure * 1e6:>12.2f}"
        if _pipeline_c is not None:
            tf = np.array(t_f)
            tb = np.array(t_b)
            fast = bench(lambda: _pipeline_c.makespan(tf, tb, n_micro), number)
            assert _pipeline_c.makespan(tf, tb, n_micro) == _pipeline_py.makespan(
                t_f, t_b, n_micro
            )
            row += f" {fast * 1e6:>14.2f} {pure / fast:>8.1f}x"
        else:
            row += f" {'not built':>14} {'-':>9}"
        print(row)

    print()
    print("macro benchmark (3-seed, 3-policy failure simulation, 32 nodes, 9h)")
    sys.stdout.flush()
    for pure in (False, True):
        env = dict(os.environ, ODYSSEY_PURE="1" if pure else "0")
        subprocess.run([sys.executable, "-c", MACRO_SNIPPET], env=env, check=True)


if __name__ == "__main__":
    main()
