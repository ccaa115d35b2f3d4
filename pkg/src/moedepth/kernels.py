"""Backend selection for the hot kernels.

The compiled extension is used when it was built and importable; setting
``MOEDEPTH_PURE_PYTHON=1`` forces the numpy fallback.  Both backends return
bit-identical results.
"""

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("MOEDEPTH_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "numpy"


def im2col(x, k):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), int(k))


def col2im(cols, c, h, w, k):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), int(c), int(h), int(w), int(k))


def nn_brute(queries, refs):
    q = np.ascontiguousarray(queries, dtype=np.float64)
    r = np.ascontiguousarray(refs, dtype=np.float64)
    if r.shape[0] == 0:
        raise ValueError("nearest-neighbour search against an empty reference set")
    return _impl.nn_brute(q, r)
