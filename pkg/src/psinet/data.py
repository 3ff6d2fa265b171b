"""Datasets and node partitioning.

Ships a binary CIFAR-10 reader, a deterministic synthetic image
generator for desk-scale experiments, and the three partition schemes
(iid, classes-per-node, Dirichlet). Partitions are index lists into the
parent dataset; the same seed always yields the same split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    """Images as float32 NCHW plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"{self.name}: images {self.images.shape} do not pair with "
                f"labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(
            self.images[indices], self.labels[indices], self.num_classes,
            name or self.name,
        )

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def present_classes(self) -> np.ndarray:
        return np.unique(self.labels)


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise FormatError(f"{path}: empty file")
    if raw.size % CIFAR_RECORD:
        good = (raw.size // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(
            f"{path}: truncated record at byte {good}; file holds {raw.size} bytes, "
            f"records are {CIFAR_RECORD} bytes"
        )
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: record {i} (byte {i * CIFAR_RECORD}) has label {labels[i]}, "
            f"expected 0..9"
        )
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(root: str) -> tuple[Dataset, Dataset]:
    """Read the binary-version CIFAR-10 layout from `root`.

    Pixels are scaled to [0, 1]; no further normalization is applied, so
    models that want standardized inputs should carry a norm layer.
    """
    missing = [
        f for f in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]
        if not os.path.exists(os.path.join(root, f))
    ]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {root}: {missing}")
    parts = [_read_cifar_file(os.path.join(root, f)) for f in CIFAR_TRAIN_FILES]
    train = Dataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        10,
        "cifar10-train",
    )
    ti, tl = _read_cifar_file(os.path.join(root, CIFAR_TEST_FILE))
    return train, Dataset(ti, tl, 10, "cifar10-test")


def synthesize_dataset(
    num_classes: int = 10,
    samples_per_class: int = 100,
    image_size: int = 16,
    noise: float = 1.2,
    seed: int = 0,
    name: str = "synthetic",
) -> Dataset:
    """Oriented-grating images, one orientation/frequency pair per class,
    plus Gaussian noise and per-sample contrast jitter. Deterministic in
    the seed and easily separable by a small conv net."""
    if num_classes < 2 or samples_per_class < 1:
        raise ConfigError("need at least 2 classes and 1 sample per class")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5D47A)))
    coords = np.arange(image_size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    templates = np.empty((num_classes, image_size, image_size), dtype=np.float64)
    for c in range(num_classes):
        theta = np.pi * c / num_classes
        freq = 2.0 + (c % 3)
        phase = 2 * np.pi * c / num_classes
        wave = np.sin(
            2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / image_size + phase
        )
        templates[c] = wave
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    contrast = rng.uniform(0.7, 1.3, size=n)
    imgs = templates[labels] * contrast[:, None, None]
    imgs += noise * rng.standard_normal(imgs.shape)
    order = rng.permutation(n)
    return Dataset(
        imgs[order, None, :, :].astype(np.float32),
        labels[order].astype(np.int64),
        num_classes,
        name,
    )


def _check_partition_args(dataset: Dataset, num_nodes: int) -> None:
    if num_nodes < 1:
        raise ConfigError(f"need at least one node, got {num_nodes}")
    if len(dataset) < num_nodes:
        raise ConfigError(
            f"{len(dataset)} samples cannot cover {num_nodes} nodes"
        )


def _chunk_evenly(indices: np.ndarray, parts: int) -> list[np.ndarray]:
    """Contiguous chunks; the first len % parts chunks get one extra."""
    base, extra = divmod(len(indices), parts)
    out = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append(indices[start : start + size])
        start += size
    return out


def partition_iid(dataset: Dataset, num_nodes: int, seed: int = 0) -> list[np.ndarray]:
    _check_partition_args(dataset, num_nodes)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x11D)))
    order = rng.permutation(len(dataset))
    return _chunk_evenly(order, num_nodes)


def partition_by_classes(
    dataset: Dataset, num_nodes: int, classes_per_node: int, seed: int = 0
) -> list[np.ndarray]:
    """Give each node `classes_per_node` classes, assigned round-robin
    over a seeded class permutation; every class's samples are split
    evenly among the nodes that hold it."""
    _check_partition_args(dataset, num_nodes)
    c = dataset.num_classes
    if not 1 <= classes_per_node <= c:
        raise ConfigError(
            f"classes_per_node must be in 1..{c}, got {classes_per_node}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC7A55)))
    perm = rng.permutation(c)
    owners: dict[int, list[int]] = {cls: [] for cls in range(c)}
    slot = 0
    for node in range(num_nodes):
        for _ in range(classes_per_node):
            owners[int(perm[slot % c])].append(node)
            slot += 1
    node_indices: list[list[np.ndarray]] = [[] for _ in range(num_nodes)]
    for cls in range(c):
        holders = owners[cls]
        if not holders:
            continue
        cls_idx = np.nonzero(dataset.labels == cls)[0]
        cls_idx = rng.permutation(cls_idx)
        for node, chunk in zip(holders, _chunk_evenly(cls_idx, len(holders))):
            node_indices[node].append(chunk)
    out = []
    for node in range(num_nodes):
        if not node_indices[node]:
            raise ConfigError(
                f"node {node} received no classes; increase classes_per_node or data"
            )
        joined = np.concatenate(node_indices[node])
        out.append(rng.permutation(joined))
    return out


def partition_dirichlet(
    dataset: Dataset, num_nodes: int, alpha: float, seed: int = 0
) -> list[np.ndarray]:
    """Per class, draw node proportions from Dirichlet(alpha) and split
    by largest-remainder quotas (ties to the lower node id)."""
    _check_partition_args(dataset, num_nodes)
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD112)))
    node_indices: list[list[np.ndarray]] = [[] for _ in range(num_nodes)]
    for cls in range(dataset.num_classes):
        cls_idx = np.nonzero(dataset.labels == cls)[0]
        if cls_idx.size == 0:
            continue
        cls_idx = rng.permutation(cls_idx)
        props = rng.dirichlet(np.full(num_nodes, alpha))
        counts = largest_remainder_counts(props, cls_idx.size)
        start = 0
        for node, cnt in enumerate(counts):
            if cnt:
                node_indices[node].append(cls_idx[start : start + cnt])
            start += cnt
    out = []
    for node in range(num_nodes):
        if not node_indices[node]:
            raise ConfigError(
                f"node {node} received no samples at alpha={alpha}; "
                f"try a larger alpha or another seed"
            )
        out.append(rng.permutation(np.concatenate(node_indices[node])))
    return out


def largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer quotas summing to `total` that round the proportions;
    leftover units go to the largest fractional parts, lower index first."""
    quotas = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        frac = quotas - counts
        order = np.lexsort((np.arange(len(frac)), -frac))
        counts[order[:short]] += 1
    return counts


def partition(
    dataset: Dataset,
    num_nodes: int,
    scheme: str,
    seed: int = 0,
    classes_per_node: int | None = None,
    alpha: float | None = None,
) -> list[np.ndarray]:
    if scheme == "iid":
        return partition_iid(dataset, num_nodes, seed)
    if scheme == "classes_per_node":
        if classes_per_node is None:
            raise ConfigError("scheme classes_per_node requires classes_per_node")
        return partition_by_classes(dataset, num_nodes, classes_per_node, seed)
    if scheme == "dirichlet":
        if alpha is None:
            raise ConfigError("scheme dirichlet requires alpha")
        return partition_dirichlet(dataset, num_nodes, alpha, seed)
    raise ConfigError(
        f"unknown partition scheme {scheme!r}; expected iid, classes_per_node, or dirichlet"
    )
