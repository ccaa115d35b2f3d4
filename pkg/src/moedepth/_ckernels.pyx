# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; bit-compatible with ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def im2col(double[:, :, ::1] x, int k):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int p = k // 2
    out_arr = np.empty((c * k * k, h * w))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ch, i, j, y, xx, row, sy, x0, x1, base
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                row = (ch * k + i) * k + j
                x0 = p - j if p - j > 0 else 0
                x1 = w + p - j if w + p - j < w else w
                for y in range(h):
                    sy = y + i - p
                    base = y * w
                    if sy < 0 or sy >= h:
                        for xx in range(w):
                            out[row, base + xx] = 0.0
                        continue
                    for xx in range(x0):
                        out[row, base + xx] = 0.0
                    for xx in range(x0, x1):
                        out[row, base + xx] = x[ch, sy, xx + j - p]
                    for xx in range(x1, w):
                        out[row, base + xx] = 0.0
    return out_arr


def col2im(double[:, ::1] cols, int c, int h, int w, int k):
    cdef int p = k // 2
    out_arr = np.zeros((c, h, w))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t ch, i, j, y, xx, row, sy, x0, x1
    # same (i, j) accumulation order as the numpy fallback
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                row = (ch * k + i) * k + j
                x0 = p - j if p - j > 0 else 0
                x1 = w + p - j if w + p - j < w else w
                for y in range(h):
                    sy = y + i - p
                    if sy < 0 or sy >= h:
                        continue
                    for xx in range(x0, x1):
                        out[ch, sy, xx + j - p] += cols[row, y * w + xx]
    return out_arr


def nn_brute(double[:, ::1] queries, double[:, ::1] refs):
    cdef Py_ssize_t m = queries.shape[0], n = refs.shape[0], a, b, best
    dist_arr = np.empty(m)
    idx_arr = np.empty(m, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double qx, qy, qz, dx, dy, dz, d2, bd
    for a in range(m):
        qx = queries[a, 0]
        qy = queries[a, 1]
        qz = queries[a, 2]
        bd = 1.0 / 0.0
        best = 0
        for b in range(n):
            dx = qx - refs[b, 0]
            dy = qy - refs[b, 1]
            dz = qz - refs[b, 2]
            d2 = dx * dx + dy * dy
            d2 = d2 + dz * dz
            if d2 < bd:
                bd = d2
                best = b
        idx[a] = best
        dist[a] = sqrt(bd)
    return dist_arr, idx_arr
