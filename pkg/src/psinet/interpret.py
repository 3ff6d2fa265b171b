"""Feature interpretation diagnostics.

For a probed layer, each channel gets a class preference vector: the
channel's spatially averaged activation times the summed spatial
gradient of each class logit, averaged over that class's probe samples.
Normalized preferences feed the total-variance depth profile (how
class-specialized a layer is), automatic shared-depth selection, and
the group alignment score that checks whether channels prefer the
classes mapped to their structure group.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import ConfigError
from .layers import GROUPED_KINDS
from .model import Model, infer_shapes
from .tensor import Tape, select_columns, tsum


def _chunks(idx: np.ndarray, size: int):
    for start in range(0, len(idx), size):
        yield idx[start : start + size]


def class_preference(
    model: Model,
    layer_name: str,
    xs: np.ndarray,
    ys: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    """Preference matrix P of shape (channels, classes), float64.

    P[i, c] averages A_i * g_i over class-c probe samples, where A_i is
    channel i's spatial mean activation and g_i the spatial sum of
    d(logit_c)/d(activation). Every class needs probe samples; channels
    with no gradient path to a class (trimmed or isolated groups) stay
    exactly zero.
    """
    spec = model.spec
    shape = infer_shapes(spec)[layer_name]
    width = shape[0]
    num_classes = spec.num_classes
    pref = np.zeros((width, num_classes), dtype=np.float64)
    for c in range(num_classes):
        idx = np.nonzero(ys == c)[0]
        if idx.size == 0:
            raise ConfigError(f"class {c} has no probe samples")
        acc = np.zeros(width, dtype=np.float64)
        for chunk in _chunks(idx, batch_size):
            with Tape() as tape:
                logits, caps = model.forward(
                    xs[chunk], train=False, capture=(layer_name,)
                )
                t = caps[layer_name]
                tape.backward(tsum(select_columns(logits, np.array([c]))))
            act = t.data.astype(np.float64)
            grad = (
                np.zeros_like(act) if t.grad is None else t.grad.astype(np.float64)
            )
            if act.ndim == 4:
                a = act.mean(axis=(2, 3))
                g = grad.sum(axis=(2, 3))
            else:
                a = act
                g = grad
            acc += (a * g).sum(axis=0)
        pref[:, c] = acc / idx.size
    return pref


def normalize_preference(pref: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and scale each channel's vector to sum 1;
    all-zero channels stay zero."""
    p = np.clip(np.asarray(pref, dtype=np.float64), 0.0, None)
    sums = p.sum(axis=1, keepdims=True)
    nz = sums[:, 0] > 0
    p[nz] = p[nz] / sums[nz]
    return p


def top_response_class(pref: np.ndarray) -> np.ndarray:
    """Per channel, the argmax class of the clamped preference (lowest
    index on ties); -1 for channels that prefer nothing."""
    p = np.clip(np.asarray(pref, dtype=np.float64), 0.0, None)
    top = p.argmax(axis=1).astype(np.int64)
    top[p.max(axis=1) == 0.0] = -1
    return top


def total_variance(pref_normalized: np.ndarray) -> float:
    """Mean euclidean distance of channel preferences from their
    centroid. Sums run over value-sorted operands, so the result is
    bitwise independent of channel order."""
    p = np.asarray(pref_normalized, dtype=np.float64)
    centroid = np.sort(p, axis=0).sum(axis=0) / p.shape[0]
    dists = np.linalg.norm(p - centroid, axis=1)
    return float(np.sort(dists).sum() / p.shape[0])


def total_variance_profile(
    model: Model,
    layer_names: list[str],
    xs: np.ndarray,
    ys: np.ndarray,
    batch_size: int = 64,
) -> list[tuple[str, float]]:
    out = []
    for name in layer_names:
        pref = class_preference(model, name, xs, ys, batch_size=batch_size)
        out.append((name, total_variance(normalize_preference(pref))))
    return out


def select_shared_depth(profile: list[tuple[str, float]], alpha: float = 0.5) -> str:
    """Last layer before the profile first exceeds alpha times its peak.

    The crossing layer is where features turn class-specialized, so
    sharing stops just below it.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if not profile:
        raise ConfigError("empty depth profile")
    peak = max(tv for _, tv in profile)
    if peak <= 0:
        raise ConfigError(
            "depth profile is flat at zero; probe data gives no signal, "
            "pass shared_depth explicitly"
        )
    threshold = alpha * peak
    # the peak strictly exceeds alpha * peak, so a crossing always exists
    cross = next(i for i, (_, tv) in enumerate(profile) if tv > threshold)
    if cross == 0:
        raise ConfigError(
            f"first probed layer {profile[0][0]!r} already exceeds the threshold; "
            f"no layer qualifies as shared, pass shared_depth explicitly"
        )
    return profile[cross - 1][0]


def channel_blocks(width: int, num_groups: int) -> np.ndarray:
    """Contiguous equal blocks: channel index -> block id."""
    if width % num_groups:
        raise ConfigError(f"{width} channels do not split into {num_groups} blocks")
    return np.repeat(np.arange(num_groups), width // num_groups)


def layer_channel_groups(model: Model, layer_name: str) -> np.ndarray:
    """Per channel, the global structure-group id; grouped layers use
    their retained ids, plain layers get -1 everywhere. A class-mapped
    head emits each group into that group's class columns rather than
    a contiguous block, so its assignment follows the class map, and
    columns of dropped groups stay -1."""
    layer = model.spec.layer(layer_name)
    width = infer_shapes(model.spec)[layer_name][0]
    if layer.kind in GROUPED_KINDS or (layer.kind == "group_norm" and layer.retained_groups):
        if layer.kind == "grouped_linear" and layer.class_map is not None:
            out = np.full(width, -1, dtype=np.int64)
            for gid, cols in zip(layer.retained_groups, layer.class_map):
                out[np.asarray(cols, dtype=np.int64)] = gid
            return out
        blk = width // len(layer.retained_groups)
        return np.repeat(np.asarray(layer.retained_groups, dtype=np.int64), blk)
    return np.full(width, -1, dtype=np.int64)


def group_alignment_score(
    pref: np.ndarray, channel_groups: np.ndarray, class_to_group
) -> float:
    """Fraction of channels whose top-response class maps to their own
    group. Channels with no preference count as unaligned."""
    top = top_response_class(pref)
    if len(top) != len(channel_groups):
        raise ConfigError(
            f"{len(top)} channels but {len(channel_groups)} group assignments"
        )
    hits = 0
    for gid, cls in zip(channel_groups, top):
        if cls >= 0 and class_to_group(int(cls)) == gid:
            hits += 1
    return hits / len(top)


def cross_node_agreement(preferences: list[np.ndarray]) -> float:
    """Mean rate, over channels and node pairs, at which two nodes'
    models give one coordinate the same top response class. Near 1 the
    nodes agree what each channel encodes; matching -1s (channels dead
    in both) count as agreement about the coordinate."""
    if len(preferences) < 2:
        raise ConfigError("agreement needs at least two preference matrices")
    tops = [top_response_class(p) for p in preferences]
    width = len(tops[0])
    if any(len(t) != width for t in tops[1:]):
        raise ConfigError("preference matrices disagree on channel count")
    total = 0.0
    pairs = 0
    for i in range(len(tops)):
        for j in range(i + 1, len(tops)):
            total += float(np.mean(tops[i] == tops[j]))
            pairs += 1
    return total / pairs


def featuremap_rows(
    model: Model,
    layer_names: list[str],
    xs: np.ndarray,
    ys: np.ndarray,
    batch_size: int = 64,
) -> list[dict]:
    """Per-channel diagnostic rows for the named layers."""
    rows = []
    for name in layer_names:
        pref = normalize_preference(
            class_preference(model, name, xs, ys, batch_size=batch_size)
        )
        top = top_response_class(pref)
        groups = layer_channel_groups(model, name)
        for ch in range(pref.shape[0]):
            rows.append(
                {
                    "layer": name,
                    "channel": ch,
                    "group": int(groups[ch]),
                    "top_class": int(top[ch]),
                    "preferences": pref[ch],
                }
            )
    return rows


def write_featuremap_csv(path: str, rows: list[dict], num_classes: int) -> None:
    header = ["layer", "channel", "group", "top_class"] + [
        f"p_{c}" for c in range(num_classes)
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [row["layer"], row["channel"], row["group"], row["top_class"]]
                + [f"{v:.8g}" for v in row["preferences"]]
            )
