"""Architecture specs, parameter initialization, and the model runner."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .backend import reference as _ref
from .errors import ConfigError, ShapeError
from .layers import (
    GROUPED_KINDS,
    LayerDescriptor,
    batch_norm_forward,
    conv_forward,
    group_norm_forward,
    grouped_conv_forward,
    grouped_linear_forward,
    layer_param_schema,
    linear_forward,
)
from .tensor import Tensor, concat, maxpool2d, relu, reshape, softmax_cross_entropy


@dataclass(frozen=True)
class ArchitectureSpec:
    """An ordered stack of layers plus the input/output contract."""

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerDescriptor, ...]

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"{self.name}: duplicate layer names")
        infer_shapes(self)

    def layer(self, name: str) -> LayerDescriptor:
        for l in self.layers:
            if l.name == name:
                return l
        raise ConfigError(f"{self.name}: no layer named {name!r}")

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise ConfigError(f"{self.name}: no layer named {name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            ld["retained_groups"] = tuple(ld.get("retained_groups") or ())
            cm = ld.get("class_map")
            ld["class_map"] = None if cm is None else tuple(tuple(c) for c in cm)
            layers.append(LayerDescriptor(**ld))
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            layers=tuple(layers),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def infer_shapes(spec: ArchitectureSpec) -> dict[str, tuple]:
    """Output shape after each layer; raises ShapeError on any mismatch."""
    shapes: dict[str, tuple] = {}
    cur: tuple = tuple(spec.input_shape)
    for layer in spec.layers:
        k = layer.kind
        if k in ("conv", "grouped_conv"):
            if len(cur) != 3:
                raise ShapeError(f"{layer.name}: conv needs CHW input, has {cur}")
            c, h, w = cur
            if c != layer.in_channels:
                raise ShapeError(
                    f"{layer.name}: expects {layer.in_channels} input channels, gets {c}"
                )
            ho = _ref.conv_out_size(h, layer.kernel, layer.stride, layer.padding)
            wo = _ref.conv_out_size(w, layer.kernel, layer.stride, layer.padding)
            cur = (layer.out_channels, ho, wo)
        elif k in ("linear", "grouped_linear"):
            if len(cur) != 1:
                raise ShapeError(f"{layer.name}: linear needs flat input, has {cur}")
            if cur[0] != layer.in_channels:
                raise ShapeError(
                    f"{layer.name}: expects {layer.in_channels} input features, gets {cur[0]}"
                )
            width = layer.num_classes if layer.class_map is not None else layer.out_channels
            cur = (width,)
        elif k in ("batch_norm", "group_norm"):
            feats = cur[0]
            if k == "group_norm" and len(cur) != 3:
                raise ShapeError(f"{layer.name}: group_norm needs CHW input, has {cur}")
            if feats != layer.out_channels:
                raise ShapeError(
                    f"{layer.name}: normalizes {layer.out_channels} features, gets {feats}"
                )
        elif k == "relu":
            pass
        elif k == "maxpool":
            if len(cur) != 3:
                raise ShapeError(f"{layer.name}: maxpool needs CHW input, has {cur}")
            c, h, w = cur
            ho = _ref.conv_out_size(h, layer.kernel, layer.stride, 0)
            wo = _ref.conv_out_size(w, layer.kernel, layer.stride, 0)
            cur = (c, ho, wo)
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        shapes[layer.name] = cur
    return shapes


def param_schema(spec: ArchitectureSpec) -> list[tuple[str, tuple]]:
    """Ordered (full name, shape) pairs covering every parameter once."""
    out = []
    for layer in spec.layers:
        for partition, short, shape in layer_param_schema(layer):
            out.append((f"{partition}/{short}", shape))
    return out


def _layer_stream(seed: int, layer_name: str, gid: int) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(layer_name.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence((seed, tag, gid)))


def init_params(spec: ArchitectureSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, unit norm scales.

    Each (layer, group) pair draws from its own seeded stream, so
    trimming groups or adding norm layers (which draw nothing) leaves
    every other tensor's values untouched. Batch-norm running variance
    starts at the -1 sentinel meaning "never trained".
    """
    params: dict[str, np.ndarray] = {}
    for layer in spec.layers:
        streams: dict[int, np.random.Generator] = {}
        for partition, short, shape in layer_param_schema(layer):
            gid = 0 if partition == "shared" else int(partition[len("group"):])
            name = f"{partition}/{short}"
            if short.endswith(".w"):
                if gid not in streams:
                    streams[gid] = _layer_stream(seed, layer.name, gid)
                if layer.kind.endswith("conv"):
                    fan_in = int(np.prod(shape[1:]))
                else:
                    fan_in = shape[0]
                std = np.sqrt(2.0 / fan_in)
                params[name] = streams[gid].normal(0.0, std, size=shape).astype(np.float32)
            elif short.endswith(".scale"):
                params[name] = np.ones(shape, dtype=np.float32)
            elif short.endswith(".running_var"):
                params[name] = np.full(shape, -1.0, dtype=np.float32)
            else:
                params[name] = np.zeros(shape, dtype=np.float32)
    return params


class Model:
    """Binds a spec to a parameter dict and runs the forward pass."""

    def __init__(self, spec: ArchitectureSpec, params: dict[str, np.ndarray]):
        expected = param_schema(spec)
        missing = [n for n, _ in expected if n not in params]
        if missing:
            raise ConfigError(f"missing parameters: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        extra = set(params) - {n for n, _ in expected}
        if extra:
            raise ConfigError(f"unexpected parameters: {sorted(extra)[:4]}")
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        for name, shape in expected:
            arr = np.asarray(params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            trainable = not name.endswith((".running_mean", ".running_var"))
            self.params[name] = Tensor(arr, requires_grad=trainable)

    @classmethod
    def init(cls, spec: ArchitectureSpec, seed: int) -> "Model":
        return cls(spec, init_params(spec, seed))

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_arrays(self, params: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if n not in params:
                raise ConfigError(f"load is missing parameter {n}")
            arr = np.asarray(params[n], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{n}: expected shape {t.data.shape}, got {arr.shape}")
            t.data[...] = arr

    def _layer_tensors(self, layer: LayerDescriptor, suffixes: tuple[str, ...]) -> list[Tensor]:
        if layer.kind in GROUPED_KINDS or (layer.kind == "group_norm" and layer.retained_groups):
            return [
                self.params[f"group{gid}/{layer.name}.{s}"]
                for s in suffixes
                for gid in layer.retained_groups
            ]
        return [self.params[f"shared/{layer.name}.{s}"] for s in suffixes]

    def forward(
        self,
        x: np.ndarray | Tensor,
        train: bool = False,
        capture: tuple[str, ...] = (),
    ):
        """Run the stack; with `capture`, also return the named layers'
        output tensors so callers can read their gradients after a
        backward pass."""
        for want in capture:
            self.spec.layer(want)
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        captured: dict[str, Tensor] = {}
        for layer in self.spec.layers:
            k = layer.kind
            if k == "conv":
                w, b = self._layer_tensors(layer, ("w", "b"))
                h = conv_forward(h, w, b, layer)
            elif k == "grouped_conv":
                g = len(layer.retained_groups)
                ts = self._layer_tensors(layer, ("w", "b"))
                h = grouped_conv_forward(h, ts[:g], ts[g:], layer)
            elif k == "linear":
                w, b = self._layer_tensors(layer, ("w", "b"))
                h = linear_forward(h, w, b)
            elif k == "grouped_linear":
                g = len(layer.retained_groups)
                ts = self._layer_tensors(layer, ("w", "b"))
                h = grouped_linear_forward(h, ts[:g], ts[g:], layer)
            elif k == "batch_norm":
                sc, sh, rm, rv = self._layer_tensors(
                    layer, ("scale", "shift", "running_mean", "running_var")
                )
                h = batch_norm_forward(h, sc, sh, rm, rv, train)
            elif k == "group_norm":
                if layer.retained_groups:
                    g = len(layer.retained_groups)
                    ts = self._layer_tensors(layer, ("scale", "shift"))
                    sc = concat(ts[:g], axis=0)
                    sh = concat(ts[g:], axis=0)
                    h = group_norm_forward(h, sc, sh, len(layer.retained_groups))
                else:
                    sc, sh = self._layer_tensors(layer, ("scale", "shift"))
                    h = group_norm_forward(h, sc, sh, layer.groups)
            elif k == "relu":
                h = relu(h)
            elif k == "maxpool":
                h = maxpool2d(h, layer.kernel, layer.stride)
            elif k == "flatten":
                h = reshape(h, (h.shape[0], -1))
            if layer.name in capture:
                captured[layer.name] = h
        if capture:
            return h, captured
        return h


def evaluate(
    model: Model, xs: np.ndarray, ys: np.ndarray, batch_size: int = 256
) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset, eval mode."""
    n = xs.shape[0]
    if n == 0:
        raise ConfigError("evaluate called with an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = xs[start : start + batch_size]
        yb = ys[start : start + batch_size]
        logits = model.forward(xb, train=False)
        loss = softmax_cross_entropy(logits, yb)
        loss_sum += float(loss.data) * xb.shape[0]
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


# ---------------------------------------------------------------------------
# neuron permutation


def permute_neurons(
    spec: ArchitectureSpec,
    params: dict[str, np.ndarray],
    layer_name: str,
    perm,
) -> dict[str, np.ndarray]:
    """Reorder the output units of one layer and compensate downstream.

    Position k of the new ordering holds old unit perm[k]. The producer's
    output dim, any interposed norm parameters, and the next weighted
    layer's input dim are gathered with the same permutation, so the
    network function is unchanged. For grouped layers the permutation
    must stay within structure-group blocks; crossing them would rewire
    features across groups.
    """
    from .errors import InvarianceError

    shapes = infer_shapes(spec)
    idx = spec.layer_index(layer_name)
    prod = spec.layers[idx]
    if prod.kind not in ("conv", "grouped_conv", "linear", "grouped_linear"):
        raise ConfigError(f"{layer_name}: can only permute conv or linear outputs")
    if prod.class_map is not None:
        raise ConfigError(f"{layer_name}: refusing to permute classifier outputs")
    width = prod.out_channels
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (width,) or not np.array_equal(np.sort(perm), np.arange(width)):
        raise ConfigError(f"{layer_name}: permutation must be a bijection on {width} units")

    def local(p: np.ndarray, sl: slice) -> np.ndarray:
        seg = p[sl]
        if seg.min() < sl.start or seg.max() >= sl.stop:
            raise InvarianceError(
                f"{layer_name}: permutation crosses structure-group boundaries"
            )
        return seg - sl.start

    new = {n: a.copy() for n, a in params.items()}

    if prod.kind in GROUPED_KINDS:
        for j, gid in enumerate(prod.retained_groups):
            lp = local(perm, prod.output_slice(j))
            wk, bk = f"group{gid}/{prod.name}.w", f"group{gid}/{prod.name}.b"
            if prod.kind == "grouped_conv":
                new[wk] = params[wk][lp]
            else:
                new[wk] = params[wk][:, lp]
            new[bk] = params[bk][lp]
    elif prod.kind == "conv":
        new[f"shared/{prod.name}.w"] = params[f"shared/{prod.name}.w"][perm]
        new[f"shared/{prod.name}.b"] = params[f"shared/{prod.name}.b"][perm]
    else:
        new[f"shared/{prod.name}.w"] = params[f"shared/{prod.name}.w"][:, perm]
        new[f"shared/{prod.name}.b"] = params[f"shared/{prod.name}.b"][perm]

    cur_perm = perm
    last = layer_name
    for layer in spec.layers[idx + 1 :]:
        k = layer.kind
        if k in ("relu", "maxpool"):
            last = layer.name
            continue
        if k == "flatten":
            c = shapes[last][0]
            span = shapes[layer.name][0] // c
            cur_perm = (cur_perm[:, None] * span + np.arange(span)[None, :]).ravel()
            last = layer.name
            continue
        if k == "batch_norm":
            for p in ("scale", "shift", "running_mean", "running_var"):
                key = f"shared/{layer.name}.{p}"
                new[key] = params[key][cur_perm]
            last = layer.name
            continue
        if k == "group_norm":
            if layer.retained_groups:
                blk = layer.out_channels // len(layer.retained_groups)
                for j, gid in enumerate(layer.retained_groups):
                    lp = local(cur_perm, slice(j * blk, (j + 1) * blk))
                    for p in ("scale", "shift"):
                        key = f"group{gid}/{layer.name}.{p}"
                        new[key] = params[key][lp]
            else:
                for p in ("scale", "shift"):
                    key = f"shared/{layer.name}.{p}"
                    new[key] = params[key][cur_perm]
            last = layer.name
            continue
        if k in ("conv", "linear"):
            key = f"shared/{layer.name}.w"
            new[key] = params[key][:, cur_perm] if k == "conv" else params[key][cur_perm]
            return new
        if k in GROUPED_KINDS:
            for j, gid in enumerate(layer.retained_groups):
                lp = local(cur_perm, layer.input_slice(j))
                key = f"group{gid}/{layer.name}.w"
                if k == "grouped_conv":
                    new[key] = params[key][:, lp]
                else:
                    new[key] = params[key][lp]
            return new
    raise ConfigError(f"{layer_name}: no downstream consumer; permuting would change outputs")
