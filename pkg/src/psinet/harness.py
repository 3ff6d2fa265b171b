"""Experiment orchestration: a config file in, artifacts out.

One experiment runs every listed strategy against the same dataset,
partition, and initialization seed, so accuracy deltas isolate the
aggregation strategy. The output directory receives metrics.csv (all
strategies; per-strategy copies alongside), featuremap.csv, one final
checkpoint per strategy, and config_resolved.json, which is itself a
valid config whose rerun reproduces every metric except wall_ms.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import __version__
from .backend import backend_name
from .builder import (
    GroupMapping,
    build_psinet,
    default_mapping,
    preset,
    PRESETS,
)
from .checkpoint import save_params
from .data import Dataset, load_cifar10, partition, synthesize_dataset
from .errors import ConfigError, NumericError
from .federation import (
    STRATEGIES,
    FederationConfig,
    local_train,
    node_rng,
    run_federation,
)
from .interpret import (
    featuremap_rows,
    select_shared_depth,
    total_variance_profile,
    write_featuremap_csv,
)
from .model import ArchitectureSpec, Model, param_schema

DATA_DIR_ENV = "PSINET_DATA_DIR"

METRICS_HEADER = [
    "round", "strategy", "node_or_global", "loss", "accuracy",
    "bytes_up", "bytes_down", "wall_ms",
]

_REQUIRED = object()


def _field(section: dict, path: str, key: str, kinds, default=_REQUIRED, choices=None):
    """Fetch section[key] with a field-level error message."""
    if key not in section or section[key] is None:
        if default is _REQUIRED:
            raise ConfigError(f"{path}.{key}: required field is missing")
        return default
    value = section[key]
    if kinds is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and kinds is int:
        raise ConfigError(f"{path}.{key}: expected int, got {value!r}")
    if not isinstance(value, kinds):
        names = getattr(kinds, "__name__", None) or "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{path}.{key}: expected {names}, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{path}.{key}: expected one of {sorted(choices)}, got {value!r}")
    return value


def _positive(value, path):
    if value <= 0:
        raise ConfigError(f"{path}: must be positive, got {value}")
    return value


def _no_unknown_keys(section: dict, path: str, known):
    extra = sorted(set(section) - set(known))
    if extra:
        raise ConfigError(f"{path}: unknown fields {extra}; expected among {sorted(known)}")


def _require_section(raw: dict, name: str) -> dict:
    if name not in raw:
        raise ConfigError(f"{name}: required section is missing")
    if not isinstance(raw[name], dict):
        raise ConfigError(f"{name}: expected an object, got {raw[name]!r}")
    return raw[name]


class ExperimentConfig:
    """Validated experiment description; see from_dict for the schema."""

    TOP_KEYS = (
        "seed", "output_dir", "dataset", "architecture", "partition",
        "regulation", "federation", "diagnostics", "resolved",
    )

    def __init__(self, seed, output_dir, dataset, architecture, partition_spec,
                 regulation, federation, diagnostics):
        self.seed = seed
        self.output_dir = output_dir
        self.dataset = dataset
        self.architecture = architecture
        self.partition = partition_spec
        self.regulation = regulation
        self.federation = federation
        self.diagnostics = diagnostics

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _no_unknown_keys(raw, "config", cls.TOP_KEYS)
        seed = _field(raw, "config", "seed", int, default=0)
        output_dir = _field(raw, "config", "output_dir", str, default=None)

        d = _require_section(raw, "dataset")
        kind = _field(d, "dataset", "kind", str, choices=("synthetic", "cifar10"))
        if kind == "synthetic":
            _no_unknown_keys(d, "dataset", (
                "kind", "num_classes", "samples_per_class",
                "test_samples_per_class", "image_size", "noise",
            ))
            dataset = {
                "kind": kind,
                "num_classes": _positive(_field(d, "dataset", "num_classes", int, default=10), "dataset.num_classes"),
                "samples_per_class": _positive(_field(d, "dataset", "samples_per_class", int, default=100), "dataset.samples_per_class"),
                "test_samples_per_class": _positive(_field(d, "dataset", "test_samples_per_class", int, default=50), "dataset.test_samples_per_class"),
                "image_size": _positive(_field(d, "dataset", "image_size", int, default=16), "dataset.image_size"),
                "noise": _field(d, "dataset", "noise", float, default=1.2),
            }
        else:
            _no_unknown_keys(d, "dataset", ("kind", "dir", "train_per_class", "test_per_class"))
            dataset = {
                "kind": kind,
                "dir": _field(d, "dataset", "dir", str, default=None),
                "train_per_class": _field(d, "dataset", "train_per_class", int, default=None),
                "test_per_class": _field(d, "dataset", "test_per_class", int, default=None),
            }

        a = _require_section(raw, "architecture")
        _no_unknown_keys(a, "architecture", ("preset", "norm"))
        architecture = {
            "preset": _field(a, "architecture", "preset", str, choices=tuple(PRESETS)),
            "norm": _field(a, "architecture", "norm", str, default="batch",
                           choices=("none", "batch", "group")),
        }

        p = _require_section(raw, "partition")
        _no_unknown_keys(p, "partition", ("scheme", "num_nodes", "classes_per_node", "alpha"))
        scheme = _field(p, "partition", "scheme", str,
                        choices=("iid", "classes_per_node", "dirichlet"))
        partition_spec = {
            "scheme": scheme,
            "num_nodes": _positive(_field(p, "partition", "num_nodes", int), "partition.num_nodes"),
            "classes_per_node": _field(p, "partition", "classes_per_node", int, default=None),
            "alpha": _field(p, "partition", "alpha", float, default=None),
        }
        if scheme == "classes_per_node" and partition_spec["classes_per_node"] is None:
            raise ConfigError("partition.classes_per_node: required for scheme classes_per_node")
        if scheme == "dirichlet" and partition_spec["alpha"] is None:
            raise ConfigError("partition.alpha: required for scheme dirichlet")

        f = _require_section(raw, "federation")
        _no_unknown_keys(f, "federation", (
            "strategies", "rounds", "local_epochs", "batch_size", "lr", "momentum",
            "weight_decay", "prox_mu", "trim", "weighted", "carry_forward",
        ))
        strategies = _field(f, "federation", "strategies", list)
        if not strategies:
            raise ConfigError("federation.strategies: need at least one strategy")
        for s in strategies:
            if s not in STRATEGIES:
                raise ConfigError(
                    f"federation.strategies: unknown strategy {s!r}; expected among {STRATEGIES}"
                )
        if len(set(strategies)) != len(strategies):
            raise ConfigError("federation.strategies: duplicate entries")
        federation = {
            "strategies": list(strategies),
            "rounds": _positive(_field(f, "federation", "rounds", int), "federation.rounds"),
            "local_epochs": _positive(_field(f, "federation", "local_epochs", int), "federation.local_epochs"),
            "batch_size": _positive(_field(f, "federation", "batch_size", int), "federation.batch_size"),
            "lr": _positive(_field(f, "federation", "lr", float), "federation.lr"),
            "momentum": _field(f, "federation", "momentum", float, default=0.0),
            "weight_decay": _field(f, "federation", "weight_decay", float, default=0.0),
            "prox_mu": _field(f, "federation", "prox_mu", float, default=0.0),
            "trim": _field(f, "federation", "trim", bool, default=True),
            "weighted": _field(f, "federation", "weighted", bool, default=False),
            "carry_forward": _field(f, "federation", "carry_forward", bool, default=True),
        }

        regulation = None
        if raw.get("regulation") is not None:
            r = _require_section(raw, "regulation")
            _no_unknown_keys(r, "regulation", (
                "num_groups", "mapping", "shared_depth", "insert_group_norm",
                "shared_norm", "probe_epochs", "probe_samples", "alpha",
            ))
            regulation = {
                "mapping": _field(r, "regulation", "mapping", str, default="contiguous",
                                  choices=("contiguous", "matched")),
                "num_groups": _field(r, "regulation", "num_groups", int, default=None),
                "shared_depth": _field(r, "regulation", "shared_depth", str),
                "insert_group_norm": _field(r, "regulation", "insert_group_norm", bool, default=True),
                "shared_norm": _field(r, "regulation", "shared_norm", str, default="batch",
                                      choices=("batch", "group")),
                "probe_epochs": _positive(_field(r, "regulation", "probe_epochs", int, default=2), "regulation.probe_epochs"),
                "probe_samples": _positive(_field(r, "regulation", "probe_samples", int, default=256), "regulation.probe_samples"),
                "alpha": _field(r, "regulation", "alpha", float, default=0.5),
            }
            if regulation["mapping"] == "contiguous" and regulation["num_groups"] is None:
                raise ConfigError("regulation.num_groups: required for contiguous mapping")
            if regulation["num_groups"] is not None:
                _positive(regulation["num_groups"], "regulation.num_groups")
        if "psinet" in strategies and regulation is None:
            raise ConfigError("regulation: required when federation.strategies includes psinet")

        g = raw.get("diagnostics") or {}
        if not isinstance(g, dict):
            raise ConfigError(f"diagnostics: expected an object, got {g!r}")
        _no_unknown_keys(g, "diagnostics", ("featuremap_layers", "probe_samples"))
        layers = _field(g, "diagnostics", "featuremap_layers", list, default=None)
        if layers is not None and not all(isinstance(x, str) for x in layers):
            raise ConfigError("diagnostics.featuremap_layers: expected a list of layer names")
        diagnostics = {
            "featuremap_layers": layers,
            "probe_samples": _positive(_field(g, "diagnostics", "probe_samples", int, default=200), "diagnostics.probe_samples"),
        }

        return cls(seed, output_dir, dataset, architecture, partition_spec,
                   regulation, federation, diagnostics)

    def base_spec(self) -> ArchitectureSpec:
        return preset(self.architecture["preset"], norm=self.architecture["norm"])


def load_experiment_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d["kind"] == "synthetic":
        train = synthesize_dataset(
            num_classes=d["num_classes"], samples_per_class=d["samples_per_class"],
            image_size=d["image_size"], noise=d["noise"], seed=cfg.seed, name="train",
        )
        test = synthesize_dataset(
            num_classes=d["num_classes"], samples_per_class=d["test_samples_per_class"],
            image_size=d["image_size"], noise=d["noise"], seed=cfg.seed + 1000, name="test",
        )
        return train, test
    root = d["dir"] or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise ConfigError(
            f"dataset.dir: not set and the {DATA_DIR_ENV} environment variable is empty"
        )
    train, test = load_cifar10(root)
    if d["train_per_class"]:
        train = _take_per_class(train, d["train_per_class"])
    if d["test_per_class"]:
        test = _take_per_class(test, d["test_per_class"])
    return train, test


def _take_per_class(ds: Dataset, k: int) -> Dataset:
    idx = np.concatenate(
        [np.flatnonzero(ds.labels == c)[:k] for c in range(ds.num_classes)]
    )
    return ds.subset(np.sort(idx))


def partition_nodes(cfg: ExperimentConfig, train: Dataset) -> list[np.ndarray]:
    p = cfg.partition
    return partition(
        train, p["num_nodes"], p["scheme"], seed=cfg.seed,
        classes_per_node=p["classes_per_node"], alpha=p["alpha"],
    )


def resolve_mapping(
    cfg: ExperimentConfig, train: Dataset, parts: list[np.ndarray]
) -> GroupMapping:
    reg = cfg.regulation
    if reg["mapping"] == "contiguous":
        return default_mapping(train.num_classes, reg["num_groups"])
    shards = sorted({tuple(sorted(np.unique(train.labels[p]).tolist())) for p in parts})
    try:
        mapping = GroupMapping(train.num_classes, tuple(shards))
    except ConfigError as err:
        raise ConfigError(
            "regulation.mapping: matched needs node class sets that tile the "
            f"label space without overlap; this partition gives {shards} ({err})"
        ) from err
    if reg["num_groups"] is not None and reg["num_groups"] != len(shards):
        raise ConfigError(
            f"regulation.num_groups: partition yields {len(shards)} matched groups, "
            f"config says {reg['num_groups']}"
        )
    return mapping


def resolve_shared_depth(
    cfg: ExperimentConfig, train: Dataset, base: ArchitectureSpec
) -> str:
    """Either the configured layer name or, for "auto", the layer picked
    by the total-variance profile of a briefly pre-trained probe model."""
    reg = cfg.regulation
    depth = reg["shared_depth"]
    candidates = [l.name for l in base.layers[:-1] if l.kind in ("conv", "linear")]
    if depth != "auto":
        if depth not in candidates:
            raise ConfigError(
                f"regulation.shared_depth: {depth!r} is not a shareable layer; "
                f"candidates are {candidates} (or 'auto')"
            )
        return depth
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD3E7)))
    take = min(reg["probe_samples"], len(train))
    idx = rng.choice(len(train), size=take, replace=False)
    xs, ys = train.images[idx], train.labels[idx]
    model = Model.init(base, cfg.seed)
    fed = cfg.federation
    local_train(
        model, xs, ys, epochs=reg["probe_epochs"], batch_size=fed["batch_size"],
        lr=fed["lr"], momentum=fed["momentum"], weight_decay=fed["weight_decay"],
        rng=np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD3E8))),
    )
    profile = total_variance_profile(model, candidates, xs, ys)
    return select_shared_depth(profile, alpha=reg["alpha"])


def _strategy_spec(cfg, strategy, base, mapping, depth) -> ArchitectureSpec:
    if strategy != "psinet":
        return base
    reg = cfg.regulation
    return build_psinet(
        base, mapping, depth,
        insert_group_norm=reg["insert_group_norm"], shared_norm=reg["shared_norm"],
    )


def _federation_config(cfg: ExperimentConfig, strategy: str) -> FederationConfig:
    f = cfg.federation
    return FederationConfig(
        strategy=strategy, rounds=f["rounds"], local_epochs=f["local_epochs"],
        batch_size=f["batch_size"], lr=f["lr"], momentum=f["momentum"],
        weight_decay=f["weight_decay"],
        prox_mu=f["prox_mu"] if strategy == "fedprox" else 0.0,
        seed=cfg.seed, trim=f["trim"], weighted=f["weighted"],
        carry_forward=f["carry_forward"],
    )


def _metrics_rows(records, strategy):
    rows = []
    for rec in records:
        who = "global" if rec.node_id is None else f"node{rec.node_id}"
        rows.append([
            rec.round, strategy, who, repr(rec.loss), repr(rec.accuracy),
            rec.bytes_up, rec.bytes_down, repr(rec.wall_ms),
        ])
    return rows


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _probe_subset(test: Dataset, per_class_budget: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFEA7)))
    k = max(1, per_class_budget // test.num_classes)
    picks = []
    for c in range(test.num_classes):
        idx = np.flatnonzero(test.labels == c)
        if idx.size:
            picks.append(rng.choice(idx, size=min(k, idx.size), replace=False))
    idx = np.sort(np.concatenate(picks))
    return test.images[idx], test.labels[idx]


def default_featuremap_layers(spec: ArchitectureSpec) -> list[str]:
    grouped = [l.name for l in spec.layers if l.kind == "grouped_conv"]
    if grouped:
        return grouped
    return [l.name for l in spec.layers if l.kind == "conv"]


def run_experiment(cfg: ExperimentConfig, output_dir: str | None = None) -> dict:
    """Run every configured strategy and write all artifacts.

    Returns a summary dict: final metrics per strategy plus artifact
    paths. A NumericError mid-run still writes the last completed
    round's checkpoint before propagating.
    """
    out = output_dir or cfg.output_dir
    if not out:
        raise ConfigError("output_dir: set it in the config or pass --output-dir")
    os.makedirs(out, exist_ok=True)

    train, test = load_experiment_data(cfg)
    parts = partition_nodes(cfg, train)
    base = cfg.base_spec()

    mapping = depth = None
    if cfg.regulation is not None:
        mapping = resolve_mapping(cfg, train, parts)
        depth = resolve_shared_depth(cfg, train, base)

    all_rows = []
    summary = {}
    artifacts = {"config": os.path.join(out, "config_resolved.json")}
    fingerprints = {}
    featuremap_source = None

    try:
        for strategy in cfg.federation["strategies"]:
            spec = _strategy_spec(cfg, strategy, base, mapping, depth)
            fingerprints[strategy] = spec.fingerprint()
            last_good = {}

            def keep_last(rnd, run, store=last_good):
                store["params"] = {k: v.copy() for k, v in run.global_params.items()}
                store["records"] = list(run.records)

            try:
                run = run_federation(
                    spec, train.images, train.labels, test.images, test.labels,
                    parts, _federation_config(cfg, strategy), round_callback=keep_last,
                )
            except NumericError:
                if last_good.get("params"):
                    rescue = os.path.join(out, f"checkpoint_{strategy}_last_good.psnf")
                    save_params(rescue, last_good["params"])
                    artifacts[f"checkpoint_{strategy}_last_good"] = rescue
                    rows = _metrics_rows(last_good["records"], strategy)
                    partial = os.path.join(out, f"metrics_{strategy}.csv")
                    _write_csv(partial, METRICS_HEADER, rows)
                raise

            rows = _metrics_rows(run.records, strategy)
            all_rows.extend(rows)
            per_path = os.path.join(out, f"metrics_{strategy}.csv")
            _write_csv(per_path, METRICS_HEADER, rows)
            artifacts[f"metrics_{strategy}"] = per_path

            ckpt = os.path.join(out, f"checkpoint_{strategy}.psnf")
            save_params(ckpt, run.global_params)
            artifacts[f"checkpoint_{strategy}"] = ckpt

            finals = [r for r in run.records if r.node_id is None]
            summary[strategy] = {
                "final_loss": finals[-1].loss,
                "final_accuracy": finals[-1].accuracy,
                "total_bytes_up": sum(r.bytes_up for r in finals),
                "total_bytes_down": sum(r.bytes_down for r in finals),
            }
            if strategy == "psinet" or featuremap_source is None:
                featuremap_source = (strategy, spec, run.global_params)
    finally:
        if all_rows:
            combined = os.path.join(out, "metrics.csv")
            _write_csv(combined, METRICS_HEADER, all_rows)
            artifacts["metrics"] = combined

    strategy, spec, params = featuremap_source
    layers = cfg.diagnostics["featuremap_layers"] or default_featuremap_layers(spec)
    missing = [l for l in layers if not any(x.name == l for x in spec.layers)]
    if missing:
        raise ConfigError(
            f"diagnostics.featuremap_layers: {missing} not in the {strategy} model; "
            f"layers are {[x.name for x in spec.layers]}"
        )
    xs, ys = _probe_subset(test, cfg.diagnostics["probe_samples"], cfg.seed)
    rows = featuremap_rows(Model(spec, params), layers, xs, ys)
    fm_path = os.path.join(out, "featuremap.csv")
    write_featuremap_csv(fm_path, rows, test.num_classes)
    artifacts["featuremap"] = fm_path

    echo = resolved_config(cfg, out, mapping, depth, fingerprints, artifacts)
    with open(artifacts["config"], "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return {"output_dir": out, "summary": summary, "artifacts": artifacts}


def resolved_config(cfg, out, mapping, depth, fingerprints, artifacts) -> dict:
    """Full echo of every effective hyperparameter; loading this dict
    reruns the experiment with identical results (wall_ms aside)."""
    regulation = None
    if cfg.regulation is not None:
        regulation = dict(cfg.regulation)
        regulation["shared_depth"] = depth  # pin even when it came from "auto"
        if regulation["mapping"] == "matched":
            regulation["num_groups"] = len(mapping.groups)
    dataset = dict(cfg.dataset)
    if dataset["kind"] == "cifar10" and not dataset["dir"]:
        dataset["dir"] = os.environ.get(DATA_DIR_ENV)
    return {
        "seed": cfg.seed,
        "output_dir": out,
        "dataset": dataset,
        "architecture": dict(cfg.architecture),
        "partition": dict(cfg.partition),
        "regulation": regulation,
        "federation": dict(cfg.federation),
        "diagnostics": dict(cfg.diagnostics),
        "resolved": {
            "package_version": __version__,
            "backend": backend_name(),
            "mapping_groups": [list(g) for g in mapping.groups] if mapping else None,
            "architecture_fingerprints": fingerprints,
            "artifacts": {k: os.path.basename(v) for k, v in artifacts.items()},
        },
    }


def diag_featuremap(
    checkpoint_path: str, layer: str, cfg: ExperimentConfig, out_path: str | None = None
) -> str:
    """Recompute per-channel preference rows for one layer of a saved
    model, probing with the config's test split."""
    from .checkpoint import load_params

    params = load_params(checkpoint_path)
    train, test = load_experiment_data(cfg)
    base = cfg.base_spec()
    candidates = [base]
    if cfg.regulation is not None:
        parts = partition_nodes(cfg, train)
        mapping = resolve_mapping(cfg, train, parts)
        depth = resolve_shared_depth(cfg, train, base)
        candidates.insert(0, _strategy_spec(cfg, "psinet", base, mapping, depth))

    have = {name: arr.shape for name, arr in params.items()}
    spec = next(
        (s for s in candidates if {n: tuple(sh) for n, sh in param_schema(s)} == have),
        None,
    )
    if spec is None:
        raise ConfigError(
            f"{checkpoint_path}: tensors do not match any architecture this config "
            f"describes (tried {[s.name for s in candidates]})"
        )
    names = [l.name for l in spec.layers]
    if layer not in names:
        raise ConfigError(f"layer {layer!r} not in model; layers are {names}")

    xs, ys = _probe_subset(test, cfg.diagnostics["probe_samples"], cfg.seed)
    rows = featuremap_rows(Model(spec, params), [layer], xs, ys)
    out = out_path or os.path.join(os.path.dirname(checkpoint_path) or ".", "featuremap.csv")
    write_featuremap_csv(out, rows, test.num_classes)
    return out


def _set_dotted(raw: dict, dotted: str, value):
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"--param {dotted}: {k!r} is not a config section")
        node = node[k]
    if keys[-1] not in node and keys[-1] not in (
        "classes_per_node", "alpha", "num_groups", "noise",
    ):
        raise ConfigError(f"--param {dotted}: no such field in the config")
    node[keys[-1]] = value


def run_sweep(config_path: str, param: str, values: list, output_dir: str) -> str:
    """Rerun one experiment per value of a dotted config field; returns
    the summary CSV path (one row per value and strategy)."""
    with open(config_path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{config_path}: not valid JSON ({err})") from err
    os.makedirs(output_dir, exist_ok=True)
    rows = []
    for value in values:
        patched = json.loads(json.dumps(raw))
        _set_dotted(patched, param, value)
        label = str(value).replace(os.sep, "_")
        sub = os.path.join(output_dir, f"{param.replace('.', '_')}_{label}")
        patched["output_dir"] = sub
        result = run_experiment(ExperimentConfig.from_dict(patched))
        for strategy, s in result["summary"].items():
            rows.append([
                param, json.dumps(value), strategy, repr(s["final_loss"]),
                repr(s["final_accuracy"]), s["total_bytes_up"], s["total_bytes_down"],
            ])
    path = os.path.join(output_dir, "sweep_summary.csv")
    _write_csv(
        path,
        ["param", "value", "strategy", "final_loss", "final_accuracy",
         "total_bytes_up", "total_bytes_down"],
        rows,
    )
    return path
