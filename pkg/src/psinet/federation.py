"""Synchronous federation engine.

One round is distribute -> local train -> aggregate -> evaluate. Plain
averaging (fedavg) and its proximal variant (fedprox) require identical
parameter sets on every node; the regulated strategy (psinet) averages
the shared partition over everyone and each group partition over just
the nodes that retained it, carrying the previous global value forward
when nobody did. All averaging runs in float64 over nodes sorted by id,
so results do not depend on update arrival order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .builder import trim_model
from .checkpoint import serialized_size
from .errors import AlignmentError, ConfigError
from .model import ArchitectureSpec, Model, evaluate, param_schema
from .tensor import SGD, Tape, softmax_cross_entropy

STRATEGIES = ("fedavg", "fedprox", "psinet")

_STUB = np.empty(0, dtype=np.float32)


@dataclass(frozen=True)
class FederationConfig:
    strategy: str
    rounds: int
    local_epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    prox_mu: float = 0.0
    seed: int = 0
    trim: bool = True
    weighted: bool = False
    carry_forward: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected {STRATEGIES}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs, and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.prox_mu < 0:
            raise ConfigError(f"prox_mu must be non-negative, got {self.prox_mu}")
        if self.prox_mu > 0 and self.strategy != "fedprox":
            raise ConfigError("prox_mu only applies to the fedprox strategy")


@dataclass
class ModelUpdate:
    """One node's trained parameters plus aggregation metadata.

    `matched` lists the structure groups whose mapped classes appear in
    the node's local data; those are the groups this node may speak for
    during aggregation. None means "derive from the parameters present"
    (an update from a trimmed model carries exactly its matched groups).
    """

    node_id: int
    params: dict[str, np.ndarray]
    num_samples: int
    family: str
    retained: tuple[int, ...] = ()
    matched: tuple[int, ...] | None = None


@dataclass
class RoundRecord:
    round: int
    node_id: int | None  # None marks the global-evaluation row
    loss: float
    accuracy: float
    bytes_up: int
    bytes_down: int
    wall_ms: float


@dataclass
class FederationRun:
    config: FederationConfig
    global_params: dict[str, np.ndarray]
    records: list[RoundRecord] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)


def node_rng(seed: int, node_id: int, round_idx: int) -> np.random.Generator:
    """Every (seed, node, round) triple gets an independent stream, so
    node results do not depend on scheduling order."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(node_id), int(round_idx))))


def local_train(
    model: Model,
    xs: np.ndarray,
    ys: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
    anchor: dict[str, np.ndarray] | None = None,
) -> dict:
    """SGD over seeded shuffles of the local shard, mutating `model`.

    With prox_mu > 0, each parameter's gradient gets mu * (w - anchor_w)
    added before the optimizer step, pulling updates toward the round's
    starting global weights. Returns the last epoch's mean sample loss.
    """
    n = xs.shape[0]
    if n == 0:
        raise ConfigError("local_train received an empty shard")
    if prox_mu > 0 and anchor is None:
        raise ConfigError("proximal training needs the round's anchor parameters")
    trainable = model.trainable()
    opt = SGD(trainable, lr=lr, momentum=momentum, weight_decay=weight_decay)
    mu = np.float32(prox_mu)
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        total_nll = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                logits = model.forward(xs[idx], train=True)
                loss = softmax_cross_entropy(logits, ys[idx])
                tape.backward(loss)
            if prox_mu > 0:
                for name, t in trainable.items():
                    t.grad += mu * (t.data - anchor[name])
            opt.step()
            total_nll += float(loss.data) * len(idx)
        epoch_loss = total_nll / n
    return {"loss": epoch_loss, "samples": n}


def _check_family(updates: list[ModelUpdate]) -> None:
    if not updates:
        raise AlignmentError("nothing to aggregate")
    families = {u.family for u in updates}
    if len(families) > 1:
        raise AlignmentError(f"updates come from different architectures: {sorted(families)}")


def _mean_arrays(
    entries: list[tuple[int, dict[str, np.ndarray]]],
    names: list[str],
    weights: dict[int, float] | None,
) -> dict[str, np.ndarray]:
    """Average named tensors over (node_id, params) entries in node-id
    order, accumulating in float64."""
    entries = sorted(entries, key=lambda e: e[0])
    out = {}
    for name in names:
        shapes = {e[1][name].shape for e in entries}
        if len(shapes) > 1:
            raise AlignmentError(f"{name}: conflicting shapes across nodes: {sorted(shapes)}")
        stack = np.stack([e[1][name].astype(np.float64) for e in entries])
        if weights is None:
            avg = stack.mean(axis=0)
        else:
            w = np.array([weights[e[0]] for e in entries], dtype=np.float64)
            w = w / w.sum()
            avg = np.tensordot(w, stack, axes=(0, 0))
        out[name] = avg.astype(np.float32)
    return out


def aggregate_fedavg(
    updates: list[ModelUpdate], weighted: bool = False
) -> dict[str, np.ndarray]:
    """Coordinate-wise average over homogeneous updates."""
    _check_family(updates)
    ids = [u.node_id for u in updates]
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"duplicate node ids in updates: {sorted(ids)}")
    names = set(updates[0].params)
    for u in updates[1:]:
        if set(u.params) != names:
            missing = sorted(names.symmetric_difference(u.params))[:4]
            raise AlignmentError(
                f"node {u.node_id} parameter names do not match (e.g. {missing}); "
                f"plain averaging needs identical models"
            )
    weights = {u.node_id: float(u.num_samples) for u in updates} if weighted else None
    entries = [(u.node_id, u.params) for u in updates]
    return _mean_arrays(entries, sorted(names), weights)


def aggregate_psinet(
    updates: list[ModelUpdate],
    previous_global: dict[str, np.ndarray],
    weighted: bool = False,
    carry_forward: bool = True,
) -> tuple[dict[str, np.ndarray], dict]:
    """Matched-group aggregation.

    Shared tensors average over every update; each group partition
    averages over the nodes matched to it. An update that carries a
    group's tensors without being matched to it (an untrimmed model
    trained where those classes are absent) is ignored for that group.
    A partition with no matched holder is carried forward from the
    previous global (or the run fails when carry_forward is off).
    Returns the assembled global and a provenance map naming each
    partition's contributors.
    """
    _check_family(updates)
    ids = [u.node_id for u in updates]
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"duplicate node ids in updates: {sorted(ids)}")

    def partition_of(name: str) -> str:
        return name.split("/", 1)[0]

    global_partitions: dict[str, list[str]] = {}
    for name in previous_global:
        global_partitions.setdefault(partition_of(name), []).append(name)
    shared_names = sorted(global_partitions.get("shared", []))

    new_global: dict[str, np.ndarray] = {}
    provenance: dict[str, dict] = {}
    for u in updates:
        missing = [n for n in shared_names if n not in u.params]
        if missing:
            raise AlignmentError(f"node {u.node_id} update lacks shared tensors {missing[:4]}")
    weights = {u.node_id: float(u.num_samples) for u in updates} if weighted else None
    new_global.update(
        _mean_arrays([(u.node_id, u.params) for u in updates], shared_names, weights)
    )
    provenance["shared"] = {"policy": "averaged", "nodes": sorted(ids)}

    for part, names in sorted(global_partitions.items()):
        if part == "shared":
            continue
        gid = int(part[len("group"):])
        holders = []
        for u in updates:
            if u.matched is None:
                if not any(n in u.params for n in names):
                    continue
            elif gid not in u.matched:
                continue
            lacking = [n for n in names if n not in u.params]
            if lacking:
                if len(lacking) == len(names):
                    raise AlignmentError(
                        f"node {u.node_id} is matched to partition {part} but sent none of it"
                    )
                raise AlignmentError(
                    f"node {u.node_id} holds partition {part} only partially: {lacking[:4]}"
                )
            holders.append(u)
        if holders:
            w = {u.node_id: float(u.num_samples) for u in holders} if weighted else None
            new_global.update(
                _mean_arrays([(u.node_id, u.params) for u in holders], sorted(names), w)
            )
            provenance[part] = {
                "policy": "averaged",
                "nodes": sorted(u.node_id for u in holders),
            }
        elif carry_forward:
            for n in names:
                new_global[n] = previous_global[n].copy()
            provenance[part] = {"policy": "carried", "nodes": []}
        else:
            raise AlignmentError(
                f"no node retained partition {part} and carry-forward is disabled"
            )

    stray = sorted(
        {n for u in updates for n in u.params} - set(previous_global)
    )
    if stray:
        raise AlignmentError(f"updates contain tensors unknown to the global model: {stray[:4]}")
    return new_global, provenance


def restrict_params(
    global_params: dict[str, np.ndarray], spec: ArchitectureSpec
) -> dict[str, np.ndarray]:
    """Copy of the tensors a node with `spec` receives from the global."""
    out = {}
    for name, _ in param_schema(spec):
        if name not in global_params:
            raise AlignmentError(f"global model lacks tensor {name} needed by {spec.name}")
        out[name] = global_params[name].copy()
    return out


@dataclass
class _Node:
    node_id: int
    spec: ArchitectureSpec
    xs: np.ndarray
    ys: np.ndarray
    retained: tuple[int, ...]
    dropped: tuple[int, ...]
    matched: tuple[int, ...] | None


def setup_nodes(
    spec: ArchitectureSpec,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    node_indices: list[np.ndarray],
    config: FederationConfig,
) -> list[_Node]:
    """Bind each node to its shard; under psinet with trimming on, nodes
    whose shard misses a group's classes get the narrowed spec."""
    from .builder import head_class_map, retained_groups_of

    nodes = []
    # trim_model only filters parameters by name here, so placeholders do
    name_stubs = {name: _STUB for name, _ in param_schema(spec)}
    for i, idx in enumerate(node_indices):
        xs = train_images[idx]
        ys = train_labels[idx]
        if len(idx) == 0:
            raise ConfigError(f"node {i} has an empty shard")
        node_spec = spec
        dropped: tuple[int, ...] = ()
        matched: tuple[int, ...] | None = None
        if config.strategy == "psinet":
            present = set(np.unique(ys).tolist())
            matched = tuple(
                gid for gid, classes in sorted(head_class_map(spec).items())
                if present.intersection(classes)
            )
            if config.trim:
                node_spec, _, dropped = trim_model(spec, name_stubs, np.unique(ys))
        nodes.append(
            _Node(
                node_id=i, spec=node_spec, xs=xs, ys=ys,
                retained=retained_groups_of(node_spec), dropped=dropped,
                matched=matched,
            )
        )
    return nodes


def run_federation(
    spec: ArchitectureSpec,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    node_indices: list[np.ndarray],
    config: FederationConfig,
    round_callback=None,
) -> FederationRun:
    """Run the full synchronous loop and return the final global model
    with per-round metrics and aggregation provenance."""
    if config.strategy == "psinet":
        from .builder import retained_groups_of

        if not retained_groups_of(spec):
            raise ConfigError("psinet strategy needs a group-regulated architecture")
    family = spec.fingerprint()
    global_params = Model.init(spec, config.seed).arrays()
    nodes = setup_nodes(spec, train_images, train_labels, node_indices, config)
    run = FederationRun(config=config, global_params=global_params)

    for rnd in range(config.rounds):
        t_round = time.perf_counter()
        updates = []
        for node in nodes:
            t_node = time.perf_counter()
            handed = restrict_params(global_params, node.spec)
            bytes_down = serialized_size(handed)
            model = Model(node.spec, handed)
            anchor = (
                {k: v.copy() for k, v in handed.items()}
                if config.strategy == "fedprox" and config.prox_mu > 0
                else None
            )
            stats = local_train(
                model, node.xs, node.ys,
                epochs=config.local_epochs, batch_size=config.batch_size,
                lr=config.lr, momentum=config.momentum,
                weight_decay=config.weight_decay,
                rng=node_rng(config.seed, node.node_id, rnd),
                prox_mu=config.prox_mu if config.strategy == "fedprox" else 0.0,
                anchor=anchor,
            )
            trained = model.arrays()
            bytes_up = serialized_size(trained)
            updates.append(
                ModelUpdate(
                    node_id=node.node_id, params=trained, num_samples=stats["samples"],
                    family=family, retained=node.retained, matched=node.matched,
                )
            )
            local_loss, local_acc = evaluate(model, node.xs, node.ys)
            run.records.append(
                RoundRecord(
                    round=rnd, node_id=node.node_id, loss=local_loss,
                    accuracy=local_acc, bytes_up=bytes_up, bytes_down=bytes_down,
                    wall_ms=(time.perf_counter() - t_node) * 1e3,
                )
            )
        if config.strategy == "psinet":
            global_params, prov = aggregate_psinet(
                updates, global_params,
                weighted=config.weighted, carry_forward=config.carry_forward,
            )
        else:
            global_params = aggregate_fedavg(updates, weighted=config.weighted)
            prov = {"shared": {"policy": "averaged", "nodes": [u.node_id for u in updates]}}
        run.provenance.append(prov)
        run.global_params = global_params

        g_loss, g_acc = evaluate(Model(spec, global_params), test_images, test_labels)
        run.records.append(
            RoundRecord(
                round=rnd, node_id=None, loss=g_loss, accuracy=g_acc,
                bytes_up=sum(r.bytes_up for r in run.records if r.round == rnd and r.node_id is not None),
                bytes_down=sum(r.bytes_down for r in run.records if r.round == rnd and r.node_id is not None),
                wall_ms=(time.perf_counter() - t_round) * 1e3,
            )
        )
        if round_callback is not None:
            round_callback(rnd, run)
    return run
