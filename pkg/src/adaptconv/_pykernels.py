"""Numpy implementations of the hot graph kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Distances are squared Euclidean, accumulated coordinate by coordinate in
index order, so both backends rank candidates identically.
"""
import numpy as np


def _sqdist(query, ref):
    # (Q, N) squared distances, summed over coordinates in order
    out = np.zeros((query.shape[0], ref.shape[0]))
    for d in range(query.shape[1]):
        diff = query[:, d, None] - ref[None, :, d]
        out += diff * diff
    return out


def knn_self(x, k, rows=None):
    """Self-loop-first kNN rows for ``rows`` (default: all points) of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    rows = np.arange(n, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    out = np.empty((rows.shape[0], k), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(n, 1))
    for start in range(0, rows.shape[0], chunk):
        r = rows[start:start + chunk]
        d = _sqdist(x[r], x)
        d[np.arange(r.shape[0]), r] = -np.inf
        # stable sort: equal distances keep index order
        out[start:start + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def knn_query(ref, query, k):
    """k nearest ``ref`` rows for each ``query`` row, ties to the smaller index."""
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    d = _sqdist(query, ref)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def farthest_point_sample(points, count, start=0):
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    selected = np.empty(count, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for t in range(count):
        selected[t] = cur
        diff = points - points[cur]
        d = np.zeros(n)
        for c in range(points.shape[1]):
            d += diff[:, c] * diff[:, c]
        np.minimum(mind, d, out=mind)
        mind[selected[:t + 1]] = -1.0
        # argmax returns the first maximal index
        cur = int(np.argmax(mind))
    return selected


def scatter_add_rows(idx, values, n):
    """out[idx[e]] += values[e] for every row e."""
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, idx, values)
    return out


def scatter_add_into(out, idx, values):
    np.add.at(out, idx, values)


def neighbor_max(x):
    """Max over axis 1 of an (R, k, M) array plus the first argmax."""
    arg = np.argmax(x, axis=1)
    vals = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return vals, arg.astype(np.int64)
