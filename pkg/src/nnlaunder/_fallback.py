"""Pure-numpy implementations of the convolution and pooling kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature.
Outputs agree exactly except where col2im accumulates overlapping windows in
a different order.  Arrays are NHWC.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    """Unfold ``x`` (N, H, W, C) into rows of (kh*kw*C) receptive-field values.

    Row order is (n, oh, ow); column order is (i, j, c) with ``c`` fastest.
    """
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    # windows: (N, OH', OW', C, kh, kw)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * oh * ow, kh * kw * c)


def col2im(cols, x_shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add rows back into an (N, H, W, C) array."""
    n, h, w, c = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    return dx


def maxpool_forward(x, pool, stride):
    """Max pool with a square window; returns (out, argmax) where argmax is the
    flat index into ``x[n, :, :, c]`` (i.e. ``row * W + col``) of each winner."""
    n, h, w, c = x.shape
    oh = (h - pool) // stride + 1
    ow = (w - pool) // stride + 1
    rows = np.arange(oh)[None, :, None, None] * stride
    cols = np.arange(ow)[None, None, :, None] * stride
    out = x[:, :stride * oh:stride, :stride * ow:stride].copy()
    argmax = np.broadcast_to(rows * w + cols, out.shape).astype(np.int64)
    # row-major scan with strict ">" keeps the first maximum, like np.argmax
    for i in range(pool):
        for j in range(pool):
            if i == 0 and j == 0:
                continue
            cand = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
            better = cand > out
            out = np.where(better, cand, out)
            argmax = np.where(better, (rows + i) * w + cols + j, argmax)
    return np.ascontiguousarray(out), argmax


def maxpool_backward(dout, argmax, x_shape, pool, stride):
    n, h, w, c = x_shape
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    index = (
        np.broadcast_to(np.arange(n)[:, None, None, None], argmax.shape),
        np.broadcast_to(np.arange(c)[None, None, None, :], argmax.shape),
        argmax,
    )
    if stride >= pool:
        dx[index] = dout
    else:
        # overlapping windows can route several outputs to one input
        np.add.at(dx, index, dout)
    return dx.reshape(n, c, h, w).transpose(0, 2, 3, 1).copy()
