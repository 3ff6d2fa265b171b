"""Layer zoo: conv, grouped conv, linear, grouped linear, batch/group norm.

Grouped layers keep one parameter tensor per structure group, named by
the group's *global* identity, so trimming a group is simply dropping
its tensors and cross-node averaging is a name match. A grouped layer
flagged `boundary` sits right above the shared block and reads the
full-width shared output, slicing it by global group id; every deeper
grouped layer reads the contiguous blocks its (possibly trimmed)
predecessor produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor, accum_grad, current_tape, _needs_grad

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1
TRIMMED_LOGIT = -1e9

GROUPED_KINDS = ("grouped_conv", "grouped_linear")
KINDS = (
    "conv",
    "grouped_conv",
    "linear",
    "grouped_linear",
    "batch_norm",
    "group_norm",
    "relu",
    "maxpool",
    "flatten",
)


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer of an architecture; grouped kinds carry group bookkeeping.

    retained_groups lists the global ids of the structure groups still
    present (all of them before trimming); total_groups is the group
    count of the full mapping. class_map gives, per retained group, the
    class indices its slice of the classifier head emits.
    """

    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 1
    retained_groups: tuple[int, ...] = ()
    total_groups: int = 1
    boundary: bool = False
    class_map: tuple[tuple[int, ...], ...] | None = None
    num_classes: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in GROUPED_KINDS:
            g = len(self.retained_groups)
            if g < 1:
                raise ConfigError(f"{self.name}: grouped layer needs retained groups")
            if self.class_map is not None and len(self.class_map) != g:
                raise ConfigError(
                    f"{self.name}: class map covers {len(self.class_map)} groups, "
                    f"expected {g}"
                )
            if self.class_map is None and self.out_channels % g:
                raise ConfigError(
                    f"{self.name}: out width {self.out_channels} not divisible by {g} groups"
                )
            in_div = self.total_groups if self.boundary else g
            if self.in_channels % in_div:
                raise ConfigError(
                    f"{self.name}: in width {self.in_channels} not divisible by {in_div} groups"
                )
        if self.kind == "group_norm":
            if self.out_channels % self.groups:
                raise ConfigError(
                    f"{self.name}: {self.out_channels} channels not divisible into "
                    f"{self.groups} normalization groups"
                )

    def input_slice(self, local_index: int) -> slice:
        """Input block read by retained group `local_index`."""
        if self.boundary:
            width = self.in_channels // self.total_groups
            gid = self.retained_groups[local_index]
            return slice(gid * width, (gid + 1) * width)
        width = self.in_channels // len(self.retained_groups)
        return slice(local_index * width, (local_index + 1) * width)

    def output_slice(self, local_index: int) -> slice:
        width = self.out_channels // len(self.retained_groups)
        return slice(local_index * width, (local_index + 1) * width)


# ---------------------------------------------------------------------------
# parameter schema and initialization


def layer_param_schema(layer: LayerDescriptor) -> list[tuple[str, str, tuple]]:
    """(partition, short name, shape) for each parameter of the layer."""
    out = []
    if layer.kind == "conv":
        blk = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        out.append(("shared", f"{layer.name}.w", blk))
        out.append(("shared", f"{layer.name}.b", (layer.out_channels,)))
    elif layer.kind == "grouped_conv":
        cin = layer.in_channels // (
            layer.total_groups if layer.boundary else len(layer.retained_groups)
        )
        cout = layer.out_channels // len(layer.retained_groups)
        for gid in layer.retained_groups:
            out.append((f"group{gid}", f"{layer.name}.w", (cout, cin, layer.kernel, layer.kernel)))
            out.append((f"group{gid}", f"{layer.name}.b", (cout,)))
    elif layer.kind == "linear":
        out.append(("shared", f"{layer.name}.w", (layer.in_channels, layer.out_channels)))
        out.append(("shared", f"{layer.name}.b", (layer.out_channels,)))
    elif layer.kind == "grouped_linear":
        fin = layer.in_channels // (
            layer.total_groups if layer.boundary else len(layer.retained_groups)
        )
        for j, gid in enumerate(layer.retained_groups):
            fout = (
                len(layer.class_map[j])
                if layer.class_map is not None
                else layer.out_channels // len(layer.retained_groups)
            )
            out.append((f"group{gid}", f"{layer.name}.w", (fin, fout)))
            out.append((f"group{gid}", f"{layer.name}.b", (fout,)))
    elif layer.kind == "batch_norm":
        c = layer.out_channels
        for p in ("scale", "shift", "running_mean", "running_var"):
            out.append(("shared", f"{layer.name}.{p}", (c,)))
    elif layer.kind == "group_norm":
        if layer.retained_groups:
            blk = layer.out_channels // len(layer.retained_groups)
            for gid in layer.retained_groups:
                out.append((f"group{gid}", f"{layer.name}.scale", (blk,)))
                out.append((f"group{gid}", f"{layer.name}.shift", (blk,)))
        else:
            out.append(("shared", f"{layer.name}.scale", (layer.out_channels,)))
            out.append(("shared", f"{layer.name}.shift", (layer.out_channels,)))
    return out


# ---------------------------------------------------------------------------
# forwards


def conv_forward(x: Tensor, w: Tensor, b: Tensor, layer: LayerDescriptor) -> Tensor:
    from .tensor import conv2d

    return conv2d(x, w, b, stride=layer.stride, padding=layer.padding)


def grouped_conv_forward(
    x: Tensor, weights: list[Tensor], biases: list[Tensor], layer: LayerDescriptor
) -> Tensor:
    """g independent convolutions on disjoint channel blocks, concatenated."""
    if x.data.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"{layer.name}: expected input with {layer.in_channels} channels, got {x.shape}"
        )
    slices = [layer.input_slice(j) for j in range(len(layer.retained_groups))]
    ys = [
        backend.conv2d_forward(
            np.ascontiguousarray(x.data[:, sl]), weights[j].data, biases[j].data,
            layer.stride, layer.padding,
        )
        for j, sl in enumerate(slices)
    ]
    out = Tensor(np.concatenate(ys, axis=1))
    tape = current_tape()
    if tape is not None:
        blk_out = layer.out_channels // len(slices)

        def backward(gy: np.ndarray) -> None:
            gx = np.zeros(x.shape, dtype=np.float32) if _needs_grad(x) else None
            for j, sl in enumerate(slices):
                gy_j = np.ascontiguousarray(gy[:, j * blk_out : (j + 1) * blk_out])
                xin = np.ascontiguousarray(x.data[:, sl])
                gxj, gw, gb = backend.conv2d_backward(
                    xin, weights[j].data, gy_j, layer.stride, layer.padding,
                    need_input_grad=gx is not None,
                )
                if gx is not None:
                    gx[:, sl] = gxj
                if _needs_grad(weights[j]):
                    accum_grad(weights[j], gw)
                if _needs_grad(biases[j]):
                    accum_grad(biases[j], gb)
            if gx is not None:
                accum_grad(x, gx)

        tape.record(out, backward, "grouped_conv")
    return out


def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    from .tensor import add, matmul

    return add(matmul(x, w), b)


def grouped_linear_forward(
    x: Tensor, weights: list[Tensor], biases: list[Tensor], layer: LayerDescriptor
) -> Tensor:
    """Per-group dense blocks; a head with a class map scatters each
    group's output to its mapped class columns and fills absent classes
    with a large negative constant (no gradient path)."""
    if x.data.ndim != 2 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"{layer.name}: expected input with {layer.in_channels} features, got {x.shape}"
        )
    n = x.shape[0]
    slices = [layer.input_slice(j) for j in range(len(layer.retained_groups))]
    is_head = layer.class_map is not None
    if is_head:
        out_cols = [np.asarray(c, dtype=np.int64) for c in layer.class_map]
        covered = sum(len(c) for c in out_cols)
        y = np.full((n, layer.num_classes), TRIMMED_LOGIT, dtype=np.float32) \
            if covered < layer.num_classes else np.empty((n, layer.num_classes), dtype=np.float32)
        for j, sl in enumerate(slices):
            y[:, out_cols[j]] = x.data[:, sl] @ weights[j].data + biases[j].data
    else:
        blk_out = layer.out_channels // len(slices)
        y = np.empty((n, layer.out_channels), dtype=np.float32)
        for j, sl in enumerate(slices):
            y[:, j * blk_out : (j + 1) * blk_out] = (
                x.data[:, sl] @ weights[j].data + biases[j].data
            )
    out = Tensor(y)
    tape = current_tape()
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            gx = np.zeros(x.shape, dtype=np.float32) if _needs_grad(x) else None
            for j, sl in enumerate(slices):
                if is_head:
                    gz = gy[:, out_cols[j]]
                else:
                    blk = layer.out_channels // len(slices)
                    gz = gy[:, j * blk : (j + 1) * blk]
                if _needs_grad(weights[j]):
                    accum_grad(weights[j], x.data[:, sl].T @ gz)
                if _needs_grad(biases[j]):
                    accum_grad(biases[j], gz.sum(axis=0))
                if gx is not None:
                    gx[:, sl] = gz @ weights[j].data.T
            if gx is not None:
                accum_grad(x, gx)

        tape.record(out, backward, "grouped_linear")
    return out


def _channel_view(arr: np.ndarray, ndim: int) -> np.ndarray:
    return arr[None, :, None, None] if ndim == 4 else arr


def batch_norm_forward(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
) -> Tensor:
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    axes = (0, 2, 3) if x.data.ndim == 4 else (0,)
    tape = current_tape()
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if (running_var.data < 0).any():
            running_mean.data[:] = mu
            running_var.data[:] = var
        else:
            running_mean.data *= 1.0 - BN_MOMENTUM
            running_mean.data += BN_MOMENTUM * mu
            running_var.data *= 1.0 - BN_MOMENTUM
            running_var.data += BN_MOMENTUM * var
        inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x.data - _channel_view(mu, x.data.ndim)) * _channel_view(inv_std, x.data.ndim)
        out = Tensor(_channel_view(scale.data, x.data.ndim) * xhat
                     + _channel_view(shift.data, x.data.ndim))
        if tape is not None:
            m = x.size // x.shape[1]

            def backward(gy: np.ndarray) -> None:
                if _needs_grad(scale):
                    accum_grad(scale, (gy * xhat).sum(axis=axes))
                if _needs_grad(shift):
                    accum_grad(shift, gy.sum(axis=axes))
                if _needs_grad(x):
                    dxhat = gy * _channel_view(scale.data, gy.ndim)
                    mean_dxhat = dxhat.sum(axis=axes) / m
                    mean_dxhat_xhat = (dxhat * xhat).sum(axis=axes) / m
                    gx = (
                        dxhat
                        - _channel_view(mean_dxhat, gy.ndim)
                        - xhat * _channel_view(mean_dxhat_xhat, gy.ndim)
                    ) * _channel_view(inv_std, gy.ndim)
                    accum_grad(x, gx.astype(np.float32))

            tape.record(out, backward, "batch_norm")
        return out

    if (running_var.data < 0).any():
        raise StateError("batch_norm eval requested before any training step set statistics")
    inv_std = 1.0 / np.sqrt(running_var.data + NORM_EPS)
    xhat = (x.data - _channel_view(running_mean.data, x.data.ndim)) * _channel_view(
        inv_std, x.data.ndim
    )
    out = Tensor(_channel_view(scale.data, x.data.ndim) * xhat
                 + _channel_view(shift.data, x.data.ndim))
    if tape is not None:
        def backward(gy: np.ndarray) -> None:
            if _needs_grad(scale):
                accum_grad(scale, (gy * xhat).sum(axis=axes))
            if _needs_grad(shift):
                accum_grad(shift, gy.sum(axis=axes))
            if _needs_grad(x):
                accum_grad(x, gy * _channel_view(scale.data * inv_std, gy.ndim))

        tape.record(out, backward, "batch_norm_eval")
    return out


def group_norm_forward(x: Tensor, scale: Tensor, shift: Tensor, groups: int) -> Tensor:
    """Normalize per (sample, group) over the group's channels and all
    spatial positions; same behavior in train and eval (batch-independent)."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    out = Tensor(scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None])
    tape = current_tape()
    if tape is not None:
        m = xg.shape[2]

        def backward(gy: np.ndarray) -> None:
            if _needs_grad(scale):
                accum_grad(scale, (gy * xhat).sum(axis=(0, 2, 3)))
            if _needs_grad(shift):
                accum_grad(shift, gy.sum(axis=(0, 2, 3)))
            if _needs_grad(x):
                dxhat = (gy * scale.data[None, :, None, None]).reshape(n, groups, -1)
                xhat_g = xhat.reshape(n, groups, -1)
                mean_dxhat = dxhat.mean(axis=2, keepdims=True)
                mean_dxhat_xhat = (dxhat * xhat_g).mean(axis=2, keepdims=True)
                gx = (dxhat - mean_dxhat - xhat_g * mean_dxhat_xhat) * inv_std
                accum_grad(x, gx.reshape(x.shape).astype(np.float32))

        tape.record(out, backward, "group_norm")
    return out
