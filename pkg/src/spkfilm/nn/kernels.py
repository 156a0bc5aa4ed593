"""Convolution lowering kernels.

The compiled extension is used when it was built and imports cleanly;
otherwise the numpy implementation is selected. Setting
``SPKFILM_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _kernels_py

_ext = None
if not os.environ.get("SPKFILM_PURE_PYTHON"):
    try:
        from . import _im2col as _ext
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
out_size = _kernels_py.out_size


def im2col(x, k, stride=1, pad=0, backend=None):
    """``(N, C, H, W) -> (N*OH*OW, C*k*k)`` patch matrix, zero padded."""
    if _use_ext(backend, x.dtype):
        return _ext.im2col(np.ascontiguousarray(x), k, stride, pad)
    return _kernels_py.im2col(x, k, stride, pad)


def col2im(col, shape, k, stride=1, pad=0, backend=None):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to ``shape``."""
    if _use_ext(backend, col.dtype):
        return _ext.col2im(np.ascontiguousarray(col), tuple(int(s) for s in shape), k, stride, pad)
    return np.ascontiguousarray(_kernels_py.col2im(col, shape, k, stride, pad))


def _use_ext(backend, dtype):
    if backend == "python":
        return False
    if backend == "cython" and _ext is None:
        raise RuntimeError("compiled kernels are not available")
    return _ext is not None and dtype in (np.float32, np.float64)
