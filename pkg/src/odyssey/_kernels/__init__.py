"""Pipeline timing kernels: compiled extension with pure-Python fallback.

The compiled module is used when it imported successfully and the
``ODYSSEY_PURE`` environment variable is unset; set ``ODYSSEY_PURE=1`` to
force the pure-Python path. ``IMPLEMENTATION`` reports which one is active.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pipeline_py

IMPLEMENTATION = "python"
_compiled = None
if os.environ.get("ODYSSEY_PURE", "") != "1":
    try:
        from . import _pipeline_c as _compiled

        IMPLEMENTATION = "compiled"
    except ImportError:
        _compiled = None


def pipeline_times(
    t_f, t_b, n_micro: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """Start/end tables for every forward/backward computation plus makespan.

    Returns ``(f_start, f_end, b_start, b_end, makespan)`` where each table
    has shape ``(n_stages, n_micro)`` and entry ``[s, j]`` is the time of
    micro-batch ``j``'s computation at stage ``s``.
    """
    if n_micro < 1 or len(t_f) < 1:
        raise ValueError("n_stages and n_micro must be >= 1")
    if _compiled is not None:
        tf = np.ascontiguousarray(t_f, dtype=np.float64)
        tb = np.ascontiguousarray(t_b, dtype=np.float64)
        shape = (len(tf), n_micro)
        f_start = np.empty(shape)
        f_end = np.empty(shape)
        b_start = np.empty(shape)
        b_end = np.empty(shape)
        span = _compiled.simulate(tf, tb, n_micro, f_start, f_end, b_start, b_end)
        return f_start, f_end, b_start, b_end, span
    n_stages = len(t_f)
    tables = [[[0.0] * n_micro for _ in range(n_stages)] for _ in range(4)]
    span = _pipeline_py.simulate(list(t_f), list(t_b), n_micro, *tables)
    return (*(np.asarray(t) for t in tables), span)


def pipeline_makespan(t_f, t_b, n_micro: int) -> float:
    """Makespan of the 1F1B schedule; the planner's hot path."""
    if n_micro < 1 or len(t_f) < 1:
        raise ValueError("n_stages and n_micro must be >= 1")
    if _compiled is not None:
        tf = np.ascontiguousarray(t_f, dtype=np.float64)
        tb = np.ascontiguousarray(t_b, dtype=np.float64)
        return _compiled.makespan(tf, tb, n_micro)
    return _pipeline_py.makespan(list(t_f), list(t_b), n_micro)
