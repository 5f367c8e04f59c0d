# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the functions in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline double _sq(const double[:, ::1] a, Py_ssize_t i,
                       const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t c
    cdef double s = 0.0, t
    for c in range(a.shape[1]):
        t = a[i, c] - b[j, c]
        s += t * t
    return s


cdef inline void _insert(double* bd, long long* bi, Py_ssize_t* filled, Py_ssize_t cap,
                         double d, long long j) noexcept nogil:
    # keep the cap best (distance, index) pairs sorted ascending
    cdef Py_ssize_t p = filled[0]
    if p == cap:
        if d >= bd[cap - 1]:
            return
        p = cap - 1
    else:
        filled[0] += 1
    while p > 0 and bd[p - 1] > d:
        bd[p] = bd[p - 1]
        bi[p] = bi[p - 1]
        p -= 1
    bd[p] = d
    bi[p] = j


def knn_self(x, Py_ssize_t k, rows=None):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    if rows is None:
        rows = np.arange(n, dtype=np.int64)
    cdef const long long[::1] rv = np.ascontiguousarray(rows, dtype=np.int64)
    cdef Py_ssize_t r = rv.shape[0]
    out = np.empty((r, k), dtype=np.int64)
    cdef long long[:, ::1] ov = out
    cdef double[::1] bd = np.empty(max(k, 1))
    cdef long long[::1] bi = np.empty(max(k, 1), dtype=np.int64)
    cdef Py_ssize_t a, j, i, filled, q
    with nogil:
        for a in range(r):
            i = rv[a]
            ov[a, 0] = i
            if k == 1:
                continue
            filled = 0
            for j in range(n):
                if j != i:
                    _insert(&bd[0], &bi[0], &filled, k - 1, _sq(xv, i, xv, j), j)
            for q in range(k - 1):
                ov[a, q + 1] = bi[q]
    return out


def knn_query(ref, query, Py_ssize_t k):
    cdef const double[:, ::1] rv = np.ascontiguousarray(ref, dtype=np.float64)
    cdef const double[:, ::1] qv = np.ascontiguousarray(query, dtype=np.float64)
    cdef Py_ssize_t n = rv.shape[0], m = qv.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    cdef long long[:, ::1] ov = out
    cdef double[::1] bd = np.empty(k)
    cdef long long[::1] bi = np.empty(k, dtype=np.int64)
    cdef Py_ssize_t a, j, filled, q
    with nogil:
        for a in range(m):
            filled = 0
            for j in range(n):
                _insert(&bd[0], &bi[0], &filled, k, _sq(qv, a, rv, j), j)
            for q in range(k):
                ov[a, q] = bi[q]
    return out


def farthest_point_sample(points, Py_ssize_t count, Py_ssize_t start=0):
    cdef const double[:, ::1] pv = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0]
    selected = np.empty(count, dtype=np.int64)
    cdef long long[::1] sv = selected
    cdef double[::1] mind = np.full(n, INFINITY)
    cdef unsigned char[::1] taken = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t t, j, cur = start, best
    cdef double d, bestd
    with nogil:
        for t in range(count):
            sv[t] = cur
            taken[cur] = 1
            best = -1
            bestd = -1.0
            for j in range(n):
                if taken[j]:
                    continue
                d = _sq(pv, cur, pv, j)
                if d < mind[j]:
                    mind[j] = d
                if mind[j] > bestd:
                    bestd = mind[j]
                    best = j
            cur = best
    return selected


def scatter_add_rows(idx, values, Py_ssize_t n):
    cdef const long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[:, ::1] vv = np.ascontiguousarray(values, dtype=np.float64)
    out = np.zeros((n, vv.shape[1]))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t e, c, row, w = vv.shape[1]
    with nogil:
        for e in range(iv.shape[0]):
            row = iv[e]
            for c in range(w):
                ov[row, c] += vv[e, c]
    return out


def scatter_add_into(double[:, ::1] out, idx, values):
    cdef const long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[:, ::1] vv = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t e, c, row, w = vv.shape[1]
    with nogil:
        for e in range(iv.shape[0]):
            row = iv[e]
            for c in range(w):
                out[row, c] += vv[e, c]


def neighbor_max(x):
    cdef const double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t r = xv.shape[0], k = xv.shape[1], m = xv.shape[2]
    vals = np.empty((r, m))
    arg = np.empty((r, m), dtype=np.int64)
    cdef double[:, ::1] vv = vals
    cdef long long[:, ::1] av = arg
    cdef Py_ssize_t a, j, c
    with nogil:
        for a in range(r):
            for c in range(m):
                vv[a, c] = xv[a, 0, c]
                av[a, c] = 0
            for j in range(1, k):
                for c in range(m):
                    # strict comparison keeps the first index on ties
                    if xv[a, j, c] > vv[a, c]:
                        vv[a, c] = xv[a, j, c]
                        av[a, c] = j
    return vals, arg
