# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (NHWC).

Signatures match ``nnlaunder._fallback``.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(const floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n * oh * ow, kh * kw * c), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, z, i, j, ch, row, col
    with nogil:
        row = 0
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[row, col] = x[b, y * stride + i, z * stride + j, ch]
                                col += 1
                    row += 1
    return out_arr


def col2im(cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    if cols.dtype == np.float32:
        return _col2im[float](np.ascontiguousarray(cols), x_shape, kh, kw, stride)
    return _col2im[double](np.ascontiguousarray(cols, dtype=np.float64), x_shape, kh, kw, stride)


cdef _col2im(const floating[:, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, y, z, i, j, ch, row, col
    with nogil:
        row = 0
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                dx[b, y * stride + i, z * stride + j, ch] += cols[row, col]
                                col += 1
                    row += 1
    return dx_arr


def maxpool_forward(const floating[:, :, :, ::1] x, Py_ssize_t pool, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - pool) // stride + 1
    cdef Py_ssize_t ow = (w - pool) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, oh, ow, c), dtype=dtype)
    arg_arr = np.empty((n, oh, ow, c), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, y, z, i, j, ch, r, q, best_idx
    cdef floating best, v
    with nogil:
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    for ch in range(c):
                        r = y * stride
                        q = z * stride
                        best = x[b, r, q, ch]
                        best_idx = r * w + q
                        # row-major scan, first maximum wins (matches numpy argmax)
                        for i in range(pool):
                            for j in range(pool):
                                v = x[b, r + i, q + j, ch]
                                if v > best:
                                    best = v
                                    best_idx = (r + i) * w + q + j
                        out[b, y, z, ch] = best
                        arg[b, y, z, ch] = best_idx
    return out_arr, arg_arr


def maxpool_backward(dout, argmax, tuple x_shape, Py_ssize_t pool, Py_ssize_t stride):
    if dout.dtype == np.float32:
        return _maxpool_backward[float](np.ascontiguousarray(dout), np.ascontiguousarray(argmax), x_shape)
    return _maxpool_backward[double](np.ascontiguousarray(dout, dtype=np.float64),
                                     np.ascontiguousarray(argmax), x_shape)


cdef _maxpool_backward(const floating[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t oh = dout.shape[1], ow = dout.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, y, z, ch, k
    with nogil:
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    for ch in range(c):
                        k = arg[b, y, z, ch]
                        dx[b, k // w, k % w, ch] += dout[b, y, z, ch]
    return dx_arr
