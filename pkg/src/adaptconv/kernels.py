"""Backend selection for the graph kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``ADAPTCONV_BACKEND=python`` to force the fallback.
"""
import os

from adaptconv import _pykernels

if os.environ.get("ADAPTCONV_BACKEND", "").lower() == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from adaptconv import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

knn_self = _impl.knn_self
knn_query = _impl.knn_query
farthest_point_sample = _impl.farthest_point_sample
scatter_add_rows = _impl.scatter_add_rows
scatter_add_into = _impl.scatter_add_into
neighbor_max = _impl.neighbor_max


def available_backends():
    """Name -> module for every backend importable in this environment."""
    out = {"python": _pykernels}
    try:
        from adaptconv import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
