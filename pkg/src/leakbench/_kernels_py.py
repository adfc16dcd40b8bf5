"""Pure numpy im2col/col2im used when the compiled core is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` [N, C, H, W] into patches [N*OH*OW, C*kh*kw]."""
    n, c, h, w = x.shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * oh : stride, : stride * ow : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back onto an [N, C, H, W] grid."""
    n, c, h, w = shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])
