"""Independent float64 reference implementations used to pin down the
package's numerics. Everything here is deliberately naive: plain loops
and textbook formulas, no shared code with the package under test.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-5


def conv2d(x, w, b, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.empty((n, cout, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            win = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            y[:, :, i, j] = np.tensordot(win, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return y


def maxpool2d(x, kernel, stride=None):
    stride = stride or kernel
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    y = np.empty((n, c, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            win = x[:, :, i * stride : i * stride + kernel, j * stride : j * stride + kernel]
            y[:, :, i, j] = win.max(axis=(2, 3))
    return y


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, 0.0)


def linear(x, w, b):
    return np.asarray(x, np.float64) @ np.asarray(w, np.float64) + np.asarray(b, np.float64)


def batch_norm_train(x, scale, shift, eps=EPS):
    x = np.asarray(x, dtype=np.float64)
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    xhat = (x - mu.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    return np.asarray(scale, np.float64).reshape(shape) * xhat + np.asarray(
        shift, np.float64
    ).reshape(shape)


def batch_norm_eval(x, scale, shift, running_mean, running_var, eps=EPS):
    x = np.asarray(x, dtype=np.float64)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    xhat = (x - np.asarray(running_mean, np.float64).reshape(shape)) / np.sqrt(
        np.asarray(running_var, np.float64).reshape(shape) + eps
    )
    return np.asarray(scale, np.float64).reshape(shape) * xhat + np.asarray(
        shift, np.float64
    ).reshape(shape)


def group_norm(x, scale, shift, groups, eps=EPS):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    xhat = ((xg - mu) / np.sqrt(var + eps)).reshape(x.shape)
    return (
        np.asarray(scale, np.float64)[None, :, None, None] * xhat
        + np.asarray(shift, np.float64)[None, :, None, None]
    )


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), np.asarray(labels)].mean()


def grouped_conv(x, weights, biases, input_slices, stride=1, padding=0):
    """Each group convolves its input channel slice; outputs concatenate."""
    parts = [
        conv2d(np.asarray(x, np.float64)[:, sl], w, b, stride, padding)
        for sl, w, b in zip(input_slices, weights, biases)
    ]
    return np.concatenate(parts, axis=1)


def grouped_linear(x, weights, biases, input_slices, out_columns, out_width, fill=0.0):
    """Each group's dense block writes its mapped output columns."""
    x = np.asarray(x, dtype=np.float64)
    y = np.full((x.shape[0], out_width), fill, dtype=np.float64)
    for sl, w, b, cols in zip(input_slices, weights, biases, out_columns):
        y[:, cols] = x[:, sl] @ np.asarray(w, np.float64) + np.asarray(b, np.float64)
    return y


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar-valued f at x, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        step = h * max(1.0, abs(x[idx]))
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
        it.iternext()
    return g


def rel_err(got, want):
    """Max abs difference scaled by the reference tensor's max magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.abs(want).max(), 1e-8)
    return float(np.abs(got - want).max() / denom)
