"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx``; the two must
agree bit for bit, so the order of floating-point operations is fixed.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_NN_CHUNK = 256


def im2col(x, k):
    """Zero-padded same-size patch matrix of shape (C*k*k, H*W) for a (C, H, W) array."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, h * w)


def col2im(cols, c, h, w, k):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto a (C, H, W) array."""
    p = k // 2
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    blocks = cols.reshape(c, k, k, h, w)
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w] += blocks[:, i, j]
    return np.ascontiguousarray(out[:, p:p + h, p:p + w])


def nn_brute(queries, refs):
    """Exact nearest reference for each query; ties go to the lowest reference index."""
    m = queries.shape[0]
    dist = np.empty(m)
    idx = np.empty(m, dtype=np.int64)
    rx, ry, rz = refs[:, 0], refs[:, 1], refs[:, 2]
    for start in range(0, m, _NN_CHUNK):
        q = queries[start:start + _NN_CHUNK]
        dx = q[:, 0:1] - rx
        dy = q[:, 1:2] - ry
        dz = q[:, 2:3] - rz
        d2 = dx * dx + dy * dy
        d2 += dz * dz
        best = np.argmin(d2, axis=1)
        idx[start:start + len(q)] = best
        dist[start:start + len(q)] = np.sqrt(d2[np.arange(len(q)), best])
    return dist, idx
