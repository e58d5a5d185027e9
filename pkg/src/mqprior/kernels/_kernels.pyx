# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled nearest-neighbor kernel.

Must return results bit-identical to the numpy fallback: distances are
accumulated dimension by dimension, ties broken toward the lowest index.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def nearest_code(queries, codes):
    """Row-wise nearest code under squared Euclidean distance."""
    cdef double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(codes, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t k = c.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, m
    cdef double acc, diff, best_d
    cdef Py_ssize_t best_i
    for i in range(n):
        best_d = -1.0
        best_i = 0
        for m in range(k):
            acc = 0.0
            for j in range(d):
                diff = q[i, j] - c[m, j]
                acc += diff * diff
            if best_d < 0.0 or acc < best_d:
                best_d = acc
                best_i = m
        idx[i] = best_i
        best[i] = best_d
    return idx, best
