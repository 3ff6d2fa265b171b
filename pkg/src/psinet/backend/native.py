"""Compiled-kernel backend: Cython gather/scatter plus the shared numpy GEMM.

Import fails cleanly when the extension was not built; the package then
falls back to `psinet.backend.reference`.
"""

from __future__ import annotations

import numpy as np

from . import _native
from .reference import _check_conv_args, conv_out_size

NAME = "native"


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=np.float32)
    _native.im2col(np.ascontiguousarray(x), kh, kw, stride, padding, cols)
    return cols


def col2im(
    cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    grad_x = np.zeros(x_shape, dtype=np.float32)
    _native.col2im(np.ascontiguousarray(cols), kh, kw, stride, padding, grad_x)
    return grad_x


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int
) -> np.ndarray:
    _check_conv_args(x, w)
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    ho = conv_out_size(x.shape[2], kh, stride, padding)
    wo = conv_out_size(x.shape[3], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    if b is not None:
        y += b[:, None]
    return y.reshape(n, cout, ho, wo)


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_y: np.ndarray,
    stride: int,
    padding: int,
    need_input_grad: bool = True,
):
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    gy = np.ascontiguousarray(grad_y.reshape(n, cout, -1))
    cols = im2col(x, kh, kw, stride, padding)
    grad_w = np.tensordot(gy, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    grad_b = gy.sum(axis=(0, 2))
    grad_x = None
    if need_input_grad:
        gcols = np.matmul(w.reshape(cout, cin * kh * kw).T, gy)
        grad_x = col2im(gcols, x.shape, kh, kw, stride, padding)
    return grad_x, grad_w, grad_b


def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, 0)
    wo = conv_out_size(w, kernel, stride, 0)
    y = np.empty((n, c, ho, wo), dtype=np.float32)
    switches = np.empty((n, c, ho, wo), dtype=np.int32)
    _native.maxpool(np.ascontiguousarray(x), kernel, stride, y, switches)
    return y, switches


def maxpool2d_backward(
    grad_y: np.ndarray, switches: np.ndarray, x_shape: tuple, kernel: int, stride: int
) -> np.ndarray:
    grad_x = np.zeros(x_shape, dtype=np.float32)
    _native.maxpool_backward(
        np.ascontiguousarray(grad_y), switches, kernel, stride, grad_x
    )
    return grad_x
