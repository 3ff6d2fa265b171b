"""Dense float32 tensors with tape-based reverse-mode differentiation.

A `Tape` records every differentiable operation executed inside its
context; `Tape.backward` replays the records in exact reverse execution
order, accumulating gradients additively into every tensor on the path.
Model state is float32 throughout; test oracles re-derive expected
values in float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend
from .errors import AlignmentError, NumericError, ShapeError


class Tensor:
    """A float32 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_op_output")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op_output = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


class _Record:
    __slots__ = ("out", "fn", "name")

    def __init__(self, out: Tensor, fn: Callable[[np.ndarray], None], name: str):
        self.out = out
        self.fn = fn
        self.name = name


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def op_names(self) -> list[str]:
        return [r.name for r in self._records]

    def record(self, out: Tensor, fn: Callable[[np.ndarray], None], name: str) -> None:
        out._op_output = True
        self._records.append(_Record(out, fn, name))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of everything reachable from `loss`.

        Visits records in exact reverse execution order; records whose
        output received no gradient are skipped, so parameters outside
        the forward graph keep their gradient untouched (exactly zero
        when pre-zeroed, None otherwise).
        """
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericError("backward on non-finite loss")
        accum_grad(loss, np.ones_like(loss.data))
        for rec in reversed(self._records):
            if rec.out.grad is not None:
                rec.fn(rec.out.grad)


def accum_grad(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._op_output


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(a):
                accum_grad(a, gy @ b.data.T)
            if _needs_grad(b):
                accum_grad(b, a.data.T @ gy)

        tape.record(out, backward, "matmul")
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    bias = b.data if b is not None else None
    out = Tensor(backend.conv2d_forward(x.data, w.data, bias, stride, padding))
    _check_finite(out.data, "conv2d")
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            gx, gw, gb = backend.conv2d_backward(
                x.data, w.data, gy, stride, padding, need_input_grad=_needs_grad(x)
            )
            if gx is not None:
                accum_grad(x, gx)
            if _needs_grad(w):
                accum_grad(w, gw)
            if b is not None and _needs_grad(b):
                accum_grad(b, gb)

        tape.record(out, backward, "conv2d")
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tape = current_tape()
    if tape is not None:
        mask = x.data > 0

        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                accum_grad(x, gy * mask)

        tape.record(out, backward, "relu")
    return out


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    stride = kernel if stride is None else stride
    y, switches = backend.maxpool2d_forward(x.data, kernel, stride)
    out = Tensor(y)
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                accum_grad(
                    x, backend.maxpool2d_backward(gy, switches, x.shape, kernel, stride)
                )

        tape.record(out, backward, "maxpool2d")
    return out


def _bias_axes(target: tuple, bias: tuple) -> tuple:
    # bias (C,) against (N, C) or (N, C, H, W)
    if len(bias) == 1 and len(target) == 2 and bias[0] == target[1]:
        return (0,)
    if len(bias) == 1 and len(target) == 4 and bias[0] == target[1]:
        return (0, 2, 3)
    raise ShapeError(f"add: unsupported broadcast of {bias} onto {target}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        reduce_axes = None
    else:
        axes = _bias_axes(a.shape, b.shape)
        bcast = b.data[None, :, None, None] if len(a.shape) == 4 else b.data
        out = Tensor(a.data + bcast)
        reduce_axes = axes
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(a):
                accum_grad(a, gy)
            if _needs_grad(b):
                accum_grad(b, gy if reduce_axes is None else gy.sum(axis=reduce_axes))

        tape.record(out, backward, "add")
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * np.float32(s))
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                accum_grad(x, gy * np.float32(s))

        tape.record(out, backward, "scale")
    return out


def mean(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    tape = current_tape()
    if tape is not None:
        inv = np.float32(1.0 / x.size)

        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                accum_grad(x, np.full(x.shape, gy * inv, dtype=np.float32))

        tape.record(out, backward, "mean")
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                accum_grad(x, np.full(x.shape, gy, dtype=np.float32))

        tape.record(out, backward, "sum")
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                accum_grad(x, gy.reshape(x.shape))

        tape.record(out, backward, "reshape")
    return out


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    tape = current_tape()
    if tape is not None:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(gy: np.ndarray) -> None:
            for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if _needs_grad(part):
                    idx = [slice(None)] * gy.ndim
                    idx[axis] = slice(lo, hi)
                    accum_grad(part, gy[tuple(idx)])

        tape.record(out, backward, "concat")
    return out


def select_columns(x: Tensor, columns: Iterable[int]) -> Tensor:
    cols = np.asarray(list(columns), dtype=np.int64)
    if x.data.ndim != 2 or cols.max(initial=-1) >= x.shape[1]:
        raise ShapeError(f"select_columns: bad columns {cols} for shape {x.shape}")
    out = Tensor(x.data[:, cols])
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(x):
                gx = np.zeros(x.shape, dtype=np.float32)
                np.add.at(gx, (slice(None), cols), gy)
                accum_grad(x, gx)

        tape.record(out, backward, "select_columns")
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    _check_finite(logits.data, "softmax_cross_entropy input")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    out = Tensor(loss)
    _check_finite(out.data, "softmax_cross_entropy")
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(logits):
                g = probs.copy()
                g[np.arange(n), labels] -= 1.0
                accum_grad(logits, g * (gy / np.float32(n)))

        tape.record(out, backward, "softmax_cross_entropy")
    return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    buffers: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One functional SGD-with-momentum update; returns (params, buffers)."""
    buffers = {} if buffers is None else buffers
    new = {}
    for name, w in params.items():
        if name not in grads:
            raise AlignmentError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != w.shape:
            raise AlignmentError(
                f"gradient shape {g.shape} does not match parameter {name!r} {w.shape}"
            )
        g = g + np.float32(weight_decay) * w if weight_decay else g
        if momentum:
            buf = buffers.get(name)
            buf = np.float32(momentum) * buf + g if buf is not None else g.astype(np.float32)
            buffers[name] = buf
            g = buf
        new[name] = w - np.float32(lr) * g
    return new, buffers


class SGD:
    """SGD with momentum and weight decay over named parameter tensors."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                raise AlignmentError(f"missing gradient for parameter {name!r}")
            g = t.grad
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * t.data
            if self.momentum:
                buf = self._buffers.get(name)
                if buf is None:
                    buf = g.astype(np.float32, copy=True)
                else:
                    buf *= np.float32(self.momentum)
                    buf += g
                self._buffers[name] = buf
                g = buf
            t.data -= np.float32(self.lr) * g
