# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for conv2d and maxpool2d.

Accumulation orders match psinet.backend.reference exactly, so results
are bit-identical between the two backends.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(float[:, :, :, ::1] x, int kh, int kw, int stride, int padding,
           float[:, :, ::1] cols):
    """Gather padded conv patches into cols (N, C*kh*kw, Ho*Wo)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t b, ci, i, j, oh, ow, row, ih, iw
    cdef float v
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oh in range(ho):
                            ih = oh * stride + i - padding
                            for ow in range(wo):
                                iw = ow * stride + j - padding
                                if 0 <= ih < h and 0 <= iw < w:
                                    v = x[b, ci, ih, iw]
                                else:
                                    v = 0.0
                                cols[b, row, oh * wo + ow] = v


def col2im(float[:, :, ::1] cols, int kh, int kw, int stride, int padding,
           float[:, :, :, ::1] out):
    """Scatter-add columns back into the zero-initialized image `out`."""
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t b, ci, i, j, oh, ow, row, ih, iw
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oh in range(ho):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wo):
                                iw = ow * stride + j - padding
                                if 0 <= iw < w:
                                    out[b, ci, ih, iw] += cols[b, row, oh * wo + ow]


def maxpool(float[:, :, :, ::1] x, int kernel, int stride,
            float[:, :, :, ::1] y, int[:, :, :, ::1] switches):
    """Max pooling; switches records the flat in-window argmax, first max wins."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t b, ci, oh, ow, i, j
    cdef float best, v
    cdef int arg
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        best = x[b, ci, oh * stride, ow * stride]
                        arg = 0
                        for i in range(kernel):
                            for j in range(kernel):
                                v = x[b, ci, oh * stride + i, ow * stride + j]
                                if v > best:
                                    best = v
                                    arg = i * kernel + j
                        y[b, ci, oh, ow] = best
                        switches[b, ci, oh, ow] = arg


def maxpool_backward(float[:, :, :, ::1] grad_y, int[:, :, :, ::1] switches,
                     int kernel, int stride, float[:, :, :, ::1] grad_x):
    """Route pooled gradients back to the argmax positions (grad_x pre-zeroed)."""
    cdef Py_ssize_t n = grad_y.shape[0], c = grad_y.shape[1]
    cdef Py_ssize_t ho = grad_y.shape[2], wo = grad_y.shape[3]
    cdef Py_ssize_t b, ci, oh, ow
    cdef int arg
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        arg = switches[b, ci, oh, ow]
                        grad_x[b, ci, oh * stride + arg // kernel,
                               ow * stride + arg % kernel] += grad_y[b, ci, oh, ow]
