# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scatter kernels for fixed-pattern sparse assembly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add(const cnp.int64_t[:, ::1] positions,
                const double[:, ::1] local,
                Py_ssize_t size):
    """Sum local[e, k] into out[positions[e, k]]; negative positions are skipped."""
    cdef Py_ssize_t ne = positions.shape[0]
    cdef Py_ssize_t nk = positions.shape[1]
    cdef Py_ssize_t e, k
    cdef cnp.int64_t pos
    out = np.zeros(size, dtype=np.float64)
    cdef double[::1] out_view = out
    for e in range(ne):
        for k in range(nk):
            pos = positions[e, k]
            if pos >= 0:
                out_view[pos] += local[e, k]
    return out


def combine_rows(const double[::1] weights, const double[:, :, ::1] components):
    """Return sum_i weights[i] * components[i] for a (n, rows, cols) stack."""
    cdef Py_ssize_t nc = components.shape[0]
    cdef Py_ssize_t nr = components.shape[1]
    cdef Py_ssize_t ncol = components.shape[2]
    cdef Py_ssize_t i, r, c
    cdef double w
    out = np.zeros((nr, ncol), dtype=np.float64)
    cdef double[:, ::1] out_view = out
    for i in range(nc):
        w = weights[i]
        if w == 0.0:
            continue
        for r in range(nr):
            for c in range(ncol):
                out_view[r, c] += w * components[i, r, c]
    return out
