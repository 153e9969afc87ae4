"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Setting ``MAMM_DISABLE_NUMBA=1``
(or having numba unavailable) selects the numpy implementations. Both
backends are importable directly as ``mamm.kernels._numba`` and
``mamm.kernels._numpy`` for benchmarking and cross-checking.
"""

import os

import numpy as np

from . import _numpy

_disabled = os.environ.get("MAMM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = _numpy
        BACKEND = "numpy"


def _xy(a):
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2)


def kernel_matrix(a, b, r):
    return _impl.kernel_matrix(_xy(a), _xy(b), float(r))


def nystrom_rows(coords, centers, r, col_mean, proj):
    return _impl.nystrom_rows(
        _xy(coords),
        _xy(centers),
        float(r),
        np.ascontiguousarray(col_mean, dtype=np.float64),
        np.ascontiguousarray(proj, dtype=np.float64),
    )


def kmeans_assign(points, centers):
    return _impl.kmeans_assign(_xy(points), _xy(centers))


def mst_max_edge(points):
    return float(_impl.mst_max_edge(_xy(points)))


def kernel_offdiag_sum(points, r):
    return float(_impl.kernel_offdiag_sum(_xy(points), float(r)))


__all__ = [
    "BACKEND",
    "kernel_matrix",
    "nystrom_rows",
    "kmeans_assign",
    "mst_max_edge",
    "kernel_offdiag_sum",
]
