"""Turn a plain spec into a group-regulated one, and trim built models.

A regulated network keeps every layer up to (and including) the chosen
shared-depth layer common to all nodes; each weighted layer above it is
split into per-group blocks, and the classifier head wires each group's
block to exactly the classes mapped to that group.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .layers import GROUPED_KINDS, LayerDescriptor
from .model import ArchitectureSpec, param_schema

_PASSTHROUGH = ("relu", "maxpool", "flatten", "batch_norm", "group_norm")


@dataclass(frozen=True)
class GroupMapping:
    """Disjoint assignment of every class to exactly one structure group."""

    num_classes: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for i, cls in enumerate(self.groups):
            if not cls:
                raise ConfigError(f"group {i} maps no classes")
            for c in cls:
                if not 0 <= c < self.num_classes:
                    raise ConfigError(f"group {i} maps out-of-range class {c}")
                if c in seen:
                    raise ConfigError(f"class {c} mapped to more than one group")
                seen.add(c)
        if len(seen) != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - seen)
            raise ConfigError(f"classes {missing} are not mapped to any group")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group_of(self, cls: int) -> int:
        for gid, classes in enumerate(self.groups):
            if cls in classes:
                return gid
        raise ConfigError(f"class {cls} out of range")

    def groups_for_classes(self, classes) -> tuple[int, ...]:
        """Global ids of groups whose class sets intersect `classes`."""
        present = set(int(c) for c in classes)
        return tuple(
            gid for gid, cls in enumerate(self.groups) if present & set(cls)
        )

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupMapping":
        return cls(int(d["num_classes"]), tuple(tuple(g) for g in d["groups"]))


def default_mapping(num_classes: int, num_groups: int) -> GroupMapping:
    """Contiguous blocks of near-equal size; the first num_classes %
    num_groups groups take the extra class."""
    if not 1 <= num_groups <= num_classes:
        raise ConfigError(
            f"need 1 <= groups <= classes, got {num_groups} groups for {num_classes} classes"
        )
    base, extra = divmod(num_classes, num_groups)
    groups = []
    start = 0
    for g in range(num_groups):
        size = base + (1 if g < extra else 0)
        groups.append(tuple(range(start, start + size)))
        start += size
    return GroupMapping(num_classes, tuple(groups))


def _first_weighted_after(spec: ArchitectureSpec, idx: int) -> int:
    for j in range(idx + 1, len(spec.layers)):
        if spec.layers[j].kind not in _PASSTHROUGH:
            return j
    return len(spec.layers)


def build_psinet(
    base: ArchitectureSpec,
    mapping: GroupMapping,
    shared_depth: str,
    insert_group_norm: bool = True,
    shared_norm: str = "batch",
) -> ArchitectureSpec:
    """Regulate every weighted layer above `shared_depth` into per-group
    blocks. Parameterless and norm layers directly after the named layer
    stay shared; batch norms in the regulated region become group norms,
    and each grouped conv without a following norm gets one inserted
    (disable with insert_group_norm=False). shared_norm="group" also
    swaps shared-region batch norms for single-group group norms.
    """
    if mapping.num_classes != base.num_classes:
        raise ConfigError(
            f"mapping covers {mapping.num_classes} classes, spec has {base.num_classes}"
        )
    if shared_norm not in ("batch", "group"):
        raise ConfigError(f"shared_norm must be 'batch' or 'group', got {shared_norm!r}")
    for l in base.layers:
        if l.kind in GROUPED_KINDS or (l.kind == "group_norm" and l.retained_groups):
            raise ConfigError(f"{base.name}: {l.name} is already grouped; build from a plain spec")
    g = mapping.num_groups
    cut = _first_weighted_after(base, base.layer_index(shared_depth))
    if cut >= len(base.layers):
        raise ConfigError(f"shared depth {shared_depth!r} leaves no layer to regulate")
    head = base.layers[-1]
    if head.kind != "linear" or head.out_channels != base.num_classes:
        raise ConfigError(f"{base.name}: last layer must be a linear head over the classes")

    all_groups = tuple(range(g))
    out: list[LayerDescriptor] = []
    for i, layer in enumerate(base.layers):
        if i < cut:
            if layer.kind == "batch_norm" and shared_norm == "group":
                out.append(
                    LayerDescriptor(
                        kind="group_norm", name=layer.name,
                        out_channels=layer.out_channels, groups=1,
                    )
                )
            else:
                out.append(layer)
            continue
        boundary = i == cut
        if layer.kind == "conv":
            if layer.out_channels % g or layer.in_channels % g:
                raise ConfigError(
                    f"{layer.name}: {layer.in_channels}->{layer.out_channels} not divisible "
                    f"into {g} groups"
                )
            out.append(
                replace(
                    layer, kind="grouped_conv", retained_groups=all_groups,
                    total_groups=g, boundary=boundary, groups=g,
                )
            )
            nxt = base.layers[i + 1].kind if i + 1 < len(base.layers) else None
            if insert_group_norm and nxt not in ("batch_norm", "group_norm"):
                out.append(
                    LayerDescriptor(
                        kind="group_norm", name=f"{layer.name}_gn",
                        out_channels=layer.out_channels, groups=g,
                        retained_groups=all_groups, total_groups=g,
                    )
                )
        elif layer.kind == "linear":
            is_head = i == len(base.layers) - 1
            if layer.in_channels % g:
                raise ConfigError(
                    f"{layer.name}: {layer.in_channels} inputs not divisible into {g} groups"
                )
            if not is_head and layer.out_channels % g:
                raise ConfigError(
                    f"{layer.name}: {layer.out_channels} outputs not divisible into {g} groups"
                )
            out.append(
                replace(
                    layer, kind="grouped_linear", retained_groups=all_groups,
                    total_groups=g, boundary=boundary, groups=g,
                    class_map=mapping.groups if is_head else None,
                    num_classes=base.num_classes if is_head else 0,
                )
            )
        elif layer.kind == "batch_norm":
            out.append(
                LayerDescriptor(
                    kind="group_norm", name=layer.name, out_channels=layer.out_channels,
                    groups=g, retained_groups=all_groups, total_groups=g,
                )
            )
        elif layer.kind == "group_norm":
            out.append(
                replace(layer, groups=g, retained_groups=all_groups, total_groups=g)
            )
        else:
            out.append(layer)
    return ArchitectureSpec(
        name=f"{base.name}-psi{g}",
        input_shape=base.input_shape,
        num_classes=base.num_classes,
        layers=tuple(out),
    )


def retained_groups_of(spec: ArchitectureSpec) -> tuple[int, ...]:
    """Global group ids still present; () for an unregulated spec."""
    for layer in spec.layers:
        if layer.kind in GROUPED_KINDS:
            return layer.retained_groups
    return ()


def head_class_map(spec: ArchitectureSpec) -> dict[int, tuple[int, ...]]:
    """Global group id -> classes it emits, read off the classifier head."""
    head = spec.layers[-1]
    if head.kind != "grouped_linear" or head.class_map is None:
        raise ConfigError(f"{spec.name}: no grouped classifier head")
    return dict(zip(head.retained_groups, head.class_map))


def trim_model(
    spec: ArchitectureSpec,
    params: dict[str, np.ndarray],
    present_classes,
) -> tuple[ArchitectureSpec, dict[str, np.ndarray], tuple[int, ...]]:
    """Drop every structure group whose mapped classes are all absent
    from `present_classes`. Returns the narrowed spec, the surviving
    parameters, and the dropped groups' global ids.
    """
    present = set(int(c) for c in present_classes)
    if not present:
        raise ConfigError("cannot trim against an empty class set")
    bad = sorted(c for c in present if not 0 <= c < spec.num_classes)
    if bad:
        raise ConfigError(f"present classes {bad} out of range for {spec.num_classes} classes")
    class_map = head_class_map(spec)
    old = retained_groups_of(spec)
    keep = tuple(g for g in old if present & set(class_map[g]))
    dropped = tuple(g for g in old if g not in keep)
    if not dropped:
        return spec, dict(params), ()

    out: list[LayerDescriptor] = []
    for layer in spec.layers:
        if layer.kind in GROUPED_KINDS:
            n_old = len(layer.retained_groups)
            blk_out = layer.out_channels // n_old if layer.class_map is None else 0
            kw = dict(retained_groups=keep)
            if layer.class_map is None:
                kw["out_channels"] = blk_out * len(keep)
            else:
                kw["class_map"] = tuple(
                    cm for g, cm in zip(layer.retained_groups, layer.class_map) if g in keep
                )
            if not layer.boundary:
                kw["in_channels"] = (layer.in_channels // n_old) * len(keep)
            out.append(replace(layer, **kw))
        elif layer.kind == "group_norm" and layer.retained_groups:
            blk = layer.out_channels // len(layer.retained_groups)
            out.append(
                replace(
                    layer, retained_groups=keep, out_channels=blk * len(keep),
                    groups=len(keep),
                )
            )
        else:
            out.append(layer)
    new_spec = ArchitectureSpec(
        name=spec.name, input_shape=spec.input_shape,
        num_classes=spec.num_classes, layers=tuple(out),
    )
    wanted = {n for n, _ in param_schema(new_spec)}
    new_params = {n: params[n] for n in params if n in wanted}
    return new_spec, new_params, dropped


# ---------------------------------------------------------------------------
# preset architectures


def make_tiny10(norm: str = "none", num_classes: int = 10) -> ArchitectureSpec:
    """Two conv blocks on 1x16x16 inputs; widths divide evenly by up to
    10 groups. Small enough for whole sweeps on a laptop."""
    layers = _stack(
        input_channels=1,
        blocks=[(20, 1), (40, 1)],
        fc=[],
        flat_features=40 * 4 * 4,
        num_classes=num_classes,
        norm=norm,
    )
    return ArchitectureSpec("tiny10", (1, 16, 16), num_classes, tuple(layers))


def make_cifar_small(norm: str = "batch", num_classes: int = 10) -> ArchitectureSpec:
    """Three conv blocks for 3x32x32 images; group-divisible widths."""
    layers = _stack(
        input_channels=3,
        blocks=[(32, 1), (40, 1), (80, 1)],
        fc=[],
        flat_features=80 * 4 * 4,
        num_classes=num_classes,
        norm=norm,
    )
    return ArchitectureSpec("cifar_small", (3, 32, 32), num_classes, tuple(layers))


def _stack(input_channels, blocks, fc, flat_features, num_classes, norm):
    if norm not in ("none", "batch", "group"):
        raise ConfigError(f"norm must be none, batch, or group, got {norm!r}")
    layers: list[LayerDescriptor] = []
    cin = input_channels
    n = 0
    for width, convs in blocks:
        for _ in range(convs):
            layers.append(
                LayerDescriptor(
                    kind="conv", name=f"conv{n}", in_channels=cin, out_channels=width,
                    kernel=3, stride=1, padding=1,
                )
            )
            if norm == "batch":
                layers.append(
                    LayerDescriptor(kind="batch_norm", name=f"norm{n}", out_channels=width)
                )
            elif norm == "group":
                layers.append(
                    LayerDescriptor(
                        kind="group_norm", name=f"norm{n}", out_channels=width, groups=1
                    )
                )
            layers.append(LayerDescriptor(kind="relu", name=f"relu{n}"))
            cin = width
            n += 1
        layers.append(LayerDescriptor(kind="maxpool", name=f"pool{n - 1}", kernel=2, stride=2))
    layers.append(LayerDescriptor(kind="flatten", name="flatten"))
    feats = flat_features
    for i, width in enumerate(fc):
        layers.append(
            LayerDescriptor(
                kind="linear", name=f"fc{i}", in_channels=feats, out_channels=width
            )
        )
        layers.append(LayerDescriptor(kind="relu", name=f"fcrelu{i}"))
        feats = width
    layers.append(
        LayerDescriptor(
            kind="linear", name=f"fc{len(fc)}", in_channels=feats, out_channels=num_classes
        )
    )
    return layers


PRESETS = {
    "tiny10": make_tiny10,
    "cifar_small": make_cifar_small,
}


def preset(name: str, **kwargs) -> ArchitectureSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown architecture {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name](**kwargs)
