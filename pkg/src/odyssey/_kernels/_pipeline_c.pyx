# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 1F1B pipeline timing kernel; mirrors ``_pipeline_py`` op order."""

from libc.stdlib cimport calloc, free


cdef inline void _op_at(int stage, int k, int n_stages, int n_micro,
                        int *is_fwd, int *j) nogil:
    cdef int warm = n_stages - stage
    cdef int paired, r, pair
    if warm > n_micro:
        warm = n_micro
    if k < warm:
        is_fwd[0] = 1
        j[0] = k
        return
    paired = n_micro - warm
    r = k - warm
    if r < 2 * paired:
        pair = r >> 1
        if (r & 1) == 0:
            is_fwd[0] = 0
            j[0] = pair
        else:
            is_fwd[0] = 1
            j[0] = warm + pair
        return
    is_fwd[0] = 0
    j[0] = paired + (r - 2 * paired)


cdef double _run(const double *t_f, const double *t_b, int n_stages, int n_micro,
                 double *f_start, double *f_end, double *b_start, double *b_end,
                 int *idx, int *fwd_done, int *bwd_done, double *clock) noexcept nogil:
    cdef int total = 2 * n_micro
    cdef long remaining = <long> n_stages * total
    cdef int s, is_fwd, j, progressed
    cdef double dep, start, end, best
    while remaining > 0:
        progressed = 0
        for s in range(n_stages):
            while idx[s] < total:
                _op_at(s, idx[s], n_stages, n_micro, &is_fwd, &j)
                if is_fwd:
                    if s > 0:
                        if fwd_done[s - 1] <= j:
                            break
                        dep = f_end[(s - 1) * n_micro + j]
                    else:
                        dep = 0.0
                    start = clock[s] if clock[s] >= dep else dep
                    end = start + t_f[s]
                    f_start[s * n_micro + j] = start
                    f_end[s * n_micro + j] = end
                    fwd_done[s] += 1
                else:
                    if s == n_stages - 1:
                        if fwd_done[s] <= j:
                            break
                        dep = f_end[s * n_micro + j]
                    else:
                        if bwd_done[s + 1] <= j:
                            break
                        dep = b_end[(s + 1) * n_micro + j]
                    start = clock[s] if clock[s] >= dep else dep
                    end = start + t_b[s]
                    b_start[s * n_micro + j] = start
                    b_end[s * n_micro + j] = end
                    bwd_done[s] += 1
                clock[s] = end
                idx[s] += 1
                remaining -= 1
                progressed = 1
        if not progressed:
            return -1.0
    best = 0.0
    for s in range(n_stages):
        if clock[s] > best:
            best = clock[s]
    return best


def simulate(double[::1] t_f, double[::1] t_b, int n_micro,
             double[:, ::1] f_start, double[:, ::1] f_end,
             double[:, ::1] b_start, double[:, ::1] b_end):
    """Fill (n_stages, n_micro) start/end tables; return makespan seconds."""
    cdef int n_stages = t_f.shape[0]
    if n_stages < 1 or n_micro < 1:
        raise ValueError("n_stages and n_micro must be >= 1")
    cdef int *idx = <int *> calloc(3 * n_stages, sizeof(int))
    cdef double *clock = <double *> calloc(n_stages, sizeof(double))
    if idx == NULL or clock == NULL:
        free(idx)
        free(clock)
        raise MemoryError()
    cdef double result
    try:
        with nogil:
            result = _run(&t_f[0], &t_b[0], n_stages, n_micro,
                          &f_start[0, 0], &f_end[0, 0], &b_start[0, 0], &b_end[0, 0],
                          idx, idx + n_stages, idx + 2 * n_stages, clock)
    finally:
        free(idx)
        free(clock)
    if result < 0.0:
        raise RuntimeError("1F1B schedule deadlocked; dependency rule violated")
    return result


def makespan(double[::1] t_f, double[::1] t_b, int n_micro):
    """Makespan only; internal scratch tables, no Python allocation per op."""
    cdef int n_stages = t_f.shape[0]
    if n_stages < 1 or n_micro < 1:
        raise ValueError("n_stages and n_micro must be >= 1")
    cdef double *tables = <double *> calloc(2 * n_stages * n_micro, sizeof(double))
    cdef int *idx = <int *> calloc(3 * n_stages, sizeof(int))
    cdef double *clock = <double *> calloc(n_stages, sizeof(double))
    if tables == NULL or idx == NULL or clock == NULL:
        free(tables)
        free(idx)
        free(clock)
        raise MemoryError()
    cdef double *f_end = tables
    cdef double *b_end = tables + n_stages * n_micro
    cdef double result
    try:
        with nogil:
            # start/end may alias: end is written after start and only end
            # values are read back as dependencies.
            result = _run(&t_f[0], &t_b[0], n_stages, n_micro,
                          f_end, f_end, b_end, b_end,
                          idx, idx + n_stages, idx + 2 * n_stages, clock)
    finally:
        free(tables)
        free(idx)
        free(clock)
    if result < 0.0:
        raise RuntimeError("1F1B schedule deadlocked; dependency rule violated")
    return result
