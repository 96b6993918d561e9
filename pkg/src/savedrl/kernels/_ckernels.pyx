# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner-loop kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def radius_any(points, queries, double alpha, int block=0):
    """For each query, whether any point lies within distance ``alpha`` (inclusive).

    Scans points per query and stops at the first hit.
    """
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] Q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], m = Q.shape[0], d = Q.shape[1]
    out_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double s, diff
    if n == 0:
        return out_arr.view(bool)
    if P.shape[1] != d:
        raise ValueError("points and queries differ in dimension")
    with nogil:
        for i in range(m):
            for j in range(n):
                s = 0.0
                for k in range(d):
                    diff = Q[i, k] - P[j, k]
                    s = s + diff * diff
                if sqrt(s) <= alpha:
                    out[i] = 1
                    break
    return out_arr.view(bool)


def count_violations(paths, rects):
    """Number of particles per candidate that touch any rectangle."""
    arr = np.ascontiguousarray(paths, dtype=np.float64)
    cdef Py_ssize_t Pn = arr.shape[0], N = arr.shape[1], S = arr.shape[2], D = arr.shape[3]
    cdef const double[:, ::1] R = np.ascontiguousarray(np.asarray(rects, dtype=np.float64).reshape(-1, 4))
    cdef const double[:, :, :, ::1] X = arr
    out_arr = np.zeros(Pn, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t p, q, s, r, nr = R.shape[0]
    cdef double x, y
    cdef bint hit
    if nr == 0:
        return out_arr
    with nogil:
        for p in range(Pn):
            for q in range(N):
                hit = False
                for s in range(S):
                    x = X[p, q, s, 0]
                    y = X[p, q, s, 1]
                    for r in range(nr):
                        if x >= R[r, 0] and x <= R[r, 1] and y >= R[r, 2] and y <= R[r, 3]:
                            hit = True
                            break
                    if hit:
                        break
                if hit:
                    out[p] += 1
    return out_arr
