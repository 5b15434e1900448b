"""Fault-tolerance planning and failure simulation for distributed training.

On each node failure the planner searches execution plans (parallel shape,
layer split, batch distribution), estimates their step time and memory, and
selects between rerouting the lost work to surviving peers and reconfiguring
the cluster, maximizing effective throughput. A deterministic event-driven
simulator replays long runs under random failures to compare policies.
"""

from ._kernels import IMPLEMENTATION as KERNEL_IMPLEMENTATION

__version__ = "0.1.0"

__all__ = ["KERNEL_IMPLEMENTATION", "__version__"]
