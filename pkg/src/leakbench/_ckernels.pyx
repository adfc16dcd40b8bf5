# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im. Accumulation order matches the numpy fallback."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, iy, ix
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                out[row, col] = x[b, ch, iy, ix]
                            col += 1
    return out_arr


def col2im(cols_in, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef double[:, ::1] cols = np.ascontiguousarray(cols_in, dtype=np.float64).reshape(
        n * oh * ow, c * kh * kw)
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, i, j, iy, ix, row
    cdef Py_ssize_t kk = kh * kw
    # (i, j) outermost so each pixel sums its contributions in the same order as numpy
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for oy in range(oh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(ow):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w:
                            continue
                        row = (b * oh + oy) * ow + ox
                        for ch in range(c):
                            out[b, ch, iy, ix] += cols[row, ch * kk + i * kw + j]
    return out_arr
