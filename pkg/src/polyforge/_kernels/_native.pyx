# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled gather/scatter kernels for same-padding convolution.

Single-pass im2col/col2im over the original (unpadded) tensor, with the
padding handled inline.  Layout contract matches _fallback.py exactly:
rows ordered (c, i, j), columns ordered (n, h, w).
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

IS_NATIVE = True

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _wrap(Py_ssize_t v, Py_ssize_t n) nogil:
    if v < 0:
        return v + n
    if v >= n:
        return v - n
    return v


def _im2col_impl(real[:, :, :, ::1] x, real[:, ::1] cols, Py_ssize_t k, bint cyclic):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t ci, i, j, ni, y, xx, r, sy, sx, base
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    r = (ci * k + i) * k + j
                    for ni in range(n):
                        for y in range(h):
                            sy = y + i - p
                            base = (ni * h + y) * w
                            if cyclic:
                                sy = _wrap(sy, h)
                                for xx in range(w):
                                    cols[r, base + xx] = x[ni, ci, sy, _wrap(xx + j - p, w)]
                            elif sy < 0 or sy >= h:
                                for xx in range(w):
                                    cols[r, base + xx] = 0
                            else:
                                for xx in range(w):
                                    sx = xx + j - p
                                    if sx < 0 or sx >= w:
                                        cols[r, base + xx] = 0
                                    else:
                                        cols[r, base + xx] = x[ni, ci, sy, sx]


def _col2im_impl(real[:, ::1] cols, real[:, :, :, ::1] out, Py_ssize_t k, bint cyclic):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t ci, i, j, ni, y, xx, r, sy, sx, base
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    r = (ci * k + i) * k + j
                    for ni in range(n):
                        for y in range(h):
                            sy = y + i - p
                            base = (ni * h + y) * w
                            if cyclic:
                                sy = _wrap(sy, h)
                                for xx in range(w):
                                    out[ni, ci, sy, _wrap(xx + j - p, w)] += cols[r, base + xx]
                            elif sy < 0 or sy >= h:
                                continue
                            else:
                                for xx in range(w):
                                    sx = xx + j - p
                                    if 0 <= sx < w:
                                        out[ni, ci, sy, sx] += cols[r, base + xx]


def im2col(x, Py_ssize_t k, str mode):
    if mode not in ("zero", "cyclic"):
        raise ValueError(f"unknown pad mode: {mode!r}")
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {x.dtype}")
    cols = np.empty((c * k * k, n * h * w), dtype=x.dtype)
    _im2col_impl(x, cols, k, mode == "cyclic")
    return cols


def col2im(cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t k, str mode):
    if mode not in ("zero", "cyclic"):
        raise ValueError(f"unknown pad mode: {mode!r}")
    cols = np.ascontiguousarray(cols)
    if cols.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {cols.dtype}")
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im_impl(cols, out, k, mode == "cyclic")
    return out
