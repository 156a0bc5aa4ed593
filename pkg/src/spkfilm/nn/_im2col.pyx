# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NCHW tensors with implicit zero padding."""

import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n_b = x.shape[0], n_c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    if real is float:
        out = np.empty((n_b * oh * ow, n_c * k * k), dtype=np.float32)
    else:
        out = np.empty((n_b * oh * ow, n_c * k * k), dtype=np.float64)
    cdef real[:, ::1] col = out
    cdef Py_ssize_t b, y, xx, c, i, j, row, ci, hi, wi
    with nogil:
        for b in range(n_b):
            for y in range(oh):
                for xx in range(ow):
                    row = (b * oh + y) * ow + xx
                    ci = 0
                    for c in range(n_c):
                        for i in range(k):
                            hi = y * stride + i - pad
                            for j in range(k):
                                wi = xx * stride + j - pad
                                if 0 <= hi < h and 0 <= wi < w:
                                    col[row, ci] = x[b, c, hi, wi]
                                else:
                                    col[row, ci] = 0
                                ci += 1
    return out


def col2im(real[:, ::1] col, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t n_b = shape[0], n_c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    if real is float:
        out = np.zeros((n_b, n_c, h, w), dtype=np.float32)
    else:
        out = np.zeros((n_b, n_c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, y, xx, c, i, j, row, ci, hi, wi
    with nogil:
        for b in range(n_b):
            for y in range(oh):
                for xx in range(ow):
                    row = (b * oh + y) * ow + xx
                    ci = 0
                    for c in range(n_c):
                        for i in range(k):
                            hi = y * stride + i - pad
                            for j in range(k):
                                wi = xx * stride + j - pad
                                if 0 <= hi < h and 0 <= wi < w:
                                    x[b, c, hi, wi] += col[row, ci]
                                ci += 1
    return out
