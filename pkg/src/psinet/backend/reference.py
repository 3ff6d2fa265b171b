"""Pure-numpy kernels: conv2d and maxpool2d, forward and backward.

Convolution is im2col + one batched float32 GEMM. The compiled backend
(`psinet.backend.native`) replaces only the gather/scatter passes
(im2col, col2im, pooling) and calls the same GEMM, so both backends
produce identical results.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

NAME = "python"


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1 or kernel < 1 or padding < 0:
        raise ShapeError(
            f"invalid geometry: kernel {kernel}, stride {stride}, padding {padding}"
        )
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"conv/pool output size {out} <= 0 for input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _check_conv_args(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {w.shape[1]}"
        )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather conv patches into (N, C*kh*kw, H_out*W_out), C-contiguous."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(patches.reshape(n, c * kh * kw, ho * wo))


def col2im(
    cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    """Scatter-add columns back to image shape (inverse of im2col)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j
            ]
    if padding > 0:
        return np.ascontiguousarray(xp[:, :, padding:-padding, padding:-padding])
    return xp


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int
) -> np.ndarray:
    _check_conv_args(x, w)
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    ho = conv_out_size(x.shape[2], kh, stride, padding)
    wo = conv_out_size(x.shape[3], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, cin * kh * kw), cols)  # (N, Cout, Ho*Wo)
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
    """Return (grad_x, grad_w, grad_b); grad_x is None when not needed."""
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    gy = grad_y.reshape(n, cout, -1)
    cols = im2col(x, kh, kw, stride, padding)
    grad_w = np.tensordot(gy, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    grad_b = gy.sum(axis=(0, 2))
    grad_x = None
    if need_input_grad:
        gcols = np.matmul(w.reshape(cout, cin * kh * kw).T, gy)
        grad_x = col2im(gcols, x.shape, kh, kw, stride, padding)
    return grad_x, grad_w, grad_b


def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int):
    """Return (y, switches); switches holds the flat in-window argmax (first max wins)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, 0)
    wo = conv_out_size(w, kernel, stride, 0)
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    ).reshape(n, c, ho, wo, kernel * kernel)
    switches = windows.argmax(axis=-1).astype(np.int32)
    y = np.take_along_axis(windows, switches[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(y), switches


def maxpool2d_backward(
    grad_y: np.ndarray, switches: np.ndarray, x_shape: tuple, kernel: int, stride: int
) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = grad_y.shape[2], grad_y.shape[3]
    grad_x = np.zeros(x_shape, dtype=grad_y.dtype)
    oh = np.arange(ho)[:, None]
    ow = np.arange(wo)[None, :]
    hi = oh * stride + switches // kernel
    wi = ow * stride + switches % kernel
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(grad_x, (ni, ci, hi, wi), grad_y)
    return grad_x
