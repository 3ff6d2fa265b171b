"""Aggregation algebra, local training, and the synchronous round loop."""

import numpy as np
import pytest

from psinet.builder import build_psinet, default_mapping, make_tiny10
from psinet.checkpoint import serialized_size
from psinet.data import partition_by_classes, synthesize_dataset
from psinet.errors import AlignmentError, ConfigError
from psinet.federation import (
    FederationConfig,
    ModelUpdate,
    aggregate_fedavg,
    aggregate_psinet,
    local_train,
    node_rng,
    restrict_params,
    run_federation,
    setup_nodes,
)
from psinet.model import Model, param_schema
from psinet.tensor import Tape, softmax_cross_entropy

from oracles import rel_err


def _upd(nid, params, n=4, family="fam", **kw):
    return ModelUpdate(node_id=nid, params=params, num_samples=n, family=family, **kw)


def _rand_params(rng, names_shapes):
    return {name: rng.standard_normal(shape).astype(np.float32) for name, shape in names_shapes}


SHAPES = [("shared/conv0.w", (4, 2, 3, 3)), ("shared/conv0.b", (4,)), ("fc.w", (4, 6))]


class TestFedavg:
    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(0)
        updates = [_upd(i, _rand_params(rng, SHAPES)) for i in range(5)]
        got = aggregate_fedavg(updates)
        for name, _ in SHAPES:
            want = np.mean(
                [u.params[name].astype(np.float64) for u in updates], axis=0
            ).astype(np.float32)
            assert rel_err(got[name], want) < 1e-12

    def test_node_order_does_not_matter(self):
        rng = np.random.default_rng(1)
        updates = [_upd(i, _rand_params(rng, SHAPES)) for i in range(6)]
        a = aggregate_fedavg(updates)
        b = aggregate_fedavg(list(reversed(updates)))
        c = aggregate_fedavg([updates[3], updates[0], updates[5], updates[1], updates[4], updates[2]])
        for name in a:
            assert np.array_equal(a[name], b[name])
            assert np.array_equal(a[name], c[name])

    def test_weighted_average(self):
        rng = np.random.default_rng(2)
        updates = [_upd(i, _rand_params(rng, SHAPES), n=n) for i, n in enumerate([1, 3, 6])]
        got = aggregate_fedavg(updates, weighted=True)
        w = np.array([1, 3, 6], dtype=np.float64) / 10.0
        for name, _ in SHAPES:
            want = sum(
                wi * u.params[name].astype(np.float64) for wi, u in zip(w, updates)
            ).astype(np.float32)
            assert rel_err(got[name], want) < 1e-6

    def test_identical_updates_average_to_themselves_bitwise(self):
        rng = np.random.default_rng(3)
        params = _rand_params(rng, SHAPES)
        updates = [_upd(i, {k: v.copy() for k, v in params.items()}) for i in range(3)]
        got = aggregate_fedavg(updates)
        for name in params:
            assert np.array_equal(got[name], params[name])

    def test_mismatched_names_rejected(self):
        rng = np.random.default_rng(4)
        u0 = _upd(0, _rand_params(rng, SHAPES))
        u1 = _upd(1, _rand_params(rng, SHAPES[:-1]))
        with pytest.raises(AlignmentError, match="parameter names"):
            aggregate_fedavg([u0, u1])

    def test_duplicate_node_ids_rejected(self):
        rng = np.random.default_rng(5)
        updates = [_upd(7, _rand_params(rng, SHAPES)) for _ in range(2)]
        with pytest.raises(AlignmentError, match="duplicate"):
            aggregate_fedavg(updates)

    def test_family_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        u0 = _upd(0, _rand_params(rng, SHAPES), family="a")
        u1 = _upd(1, _rand_params(rng, SHAPES), family="b")
        with pytest.raises(AlignmentError, match="different architectures"):
            aggregate_fedavg([u0, u1])

    def test_shape_conflict_rejected(self):
        rng = np.random.default_rng(7)
        u0 = _upd(0, _rand_params(rng, SHAPES))
        u1 = _upd(1, _rand_params(rng, SHAPES))
        u1.params["fc.w"] = rng.standard_normal((4, 7)).astype(np.float32)
        with pytest.raises(AlignmentError, match="conflicting shapes"):
            aggregate_fedavg([u0, u1])

    def test_empty_update_list_rejected(self):
        with pytest.raises(AlignmentError, match="nothing"):
            aggregate_fedavg([])


PSI_SHAPES = {
    "shared": [("shared/conv0.w", (4, 2, 3, 3))],
    "group0": [("group0/conv1.w", (3, 2, 3, 3)), ("group0/conv1.b", (3,))],
    "group1": [("group1/conv1.w", (3, 2, 3, 3)), ("group1/conv1.b", (3,))],
    "group2": [("group2/conv1.w", (3, 2, 3, 3)), ("group2/conv1.b", (3,))],
}


def _psi_global(rng):
    out = {}
    for shapes in PSI_SHAPES.values():
        out.update(_rand_params(rng, shapes))
    return out


def _psi_update(rng, nid, parts, n=4, matched=None):
    shapes = [s for p in parts for s in PSI_SHAPES[p]]
    return _upd(nid, _rand_params(rng, shapes), n=n, matched=matched)


class TestPsinetAggregation:
    def test_matched_groups_average_over_holders_only(self):
        rng = np.random.default_rng(10)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"])
        u1 = _psi_update(rng, 1, ["shared", "group0"])
        u2 = _psi_update(rng, 2, ["shared", "group1"])
        got, prov = aggregate_psinet([u0, u1, u2], prev)

        for name, _ in PSI_SHAPES["shared"]:
            want = np.mean(
                [u.params[name].astype(np.float64) for u in (u0, u1, u2)], axis=0
            ).astype(np.float32)
            assert rel_err(got[name], want) < 1e-12
        for name, _ in PSI_SHAPES["group0"]:
            want = np.mean(
                [u.params[name].astype(np.float64) for u in (u0, u1)], axis=0
            ).astype(np.float32)
            assert rel_err(got[name], want) < 1e-12
        for name, _ in PSI_SHAPES["group1"]:
            assert np.array_equal(got[name], u2.params[name])

        assert prov["shared"] == {"policy": "averaged", "nodes": [0, 1, 2]}
        assert prov["group0"] == {"policy": "averaged", "nodes": [0, 1]}
        assert prov["group1"] == {"policy": "averaged", "nodes": [2]}

    def test_unheld_partition_is_carried_forward_bitwise(self):
        rng = np.random.default_rng(11)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"])
        got, prov = aggregate_psinet([u0], prev)
        for name, _ in PSI_SHAPES["group1"] + PSI_SHAPES["group2"]:
            assert np.array_equal(got[name], prev[name])
        assert prov["group1"] == {"policy": "carried", "nodes": []}
        assert prov["group2"] == {"policy": "carried", "nodes": []}

    def test_carry_forward_disabled_raises(self):
        rng = np.random.default_rng(12)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"])
        with pytest.raises(AlignmentError, match="carry-forward"):
            aggregate_psinet([u0], prev, carry_forward=False)

    def test_weighted_average_within_matched_set(self):
        rng = np.random.default_rng(13)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"], n=1)
        u1 = _psi_update(rng, 1, ["shared", "group0"], n=3)
        got, _ = aggregate_psinet([u0, u1], prev, weighted=True)
        for name, _ in PSI_SHAPES["group0"]:
            want = (
                0.25 * u0.params[name].astype(np.float64)
                + 0.75 * u1.params[name].astype(np.float64)
            ).astype(np.float32)
            assert rel_err(got[name], want) < 1e-6

    def test_node_order_does_not_matter(self):
        rng = np.random.default_rng(14)
        prev = _psi_global(rng)
        updates = [
            _psi_update(rng, 0, ["shared", "group0", "group2"]),
            _psi_update(rng, 1, ["shared", "group0"]),
            _psi_update(rng, 2, ["shared", "group1"]),
        ]
        a, _ = aggregate_psinet(updates, prev)
        b, _ = aggregate_psinet(list(reversed(updates)), prev)
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_explicit_matched_overrides_structural_presence(self):
        # an untrimmed node sends every tensor but only speaks for its
        # matched group; its copy of the other group must be ignored
        rng = np.random.default_rng(15)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0", "group1", "group2"], matched=(0,))
        u1 = _psi_update(rng, 1, ["shared", "group0", "group1", "group2"], matched=(1,))
        got, prov = aggregate_psinet([u0, u1], prev)
        for name, _ in PSI_SHAPES["group0"]:
            assert np.array_equal(got[name], u0.params[name])
        for name, _ in PSI_SHAPES["group1"]:
            assert np.array_equal(got[name], u1.params[name])
        for name, _ in PSI_SHAPES["group2"]:
            assert np.array_equal(got[name], prev[name])
        assert prov["group0"]["nodes"] == [0]
        assert prov["group1"]["nodes"] == [1]
        assert prov["group2"]["policy"] == "carried"

    def test_matched_node_missing_its_partition_rejected(self):
        rng = np.random.default_rng(16)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"], matched=(0, 1))
        with pytest.raises(AlignmentError, match="sent none"):
            aggregate_psinet([u0], prev)

    def test_partial_partition_rejected(self):
        rng = np.random.default_rng(17)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"])
        del u0.params["group0/conv1.b"]
        with pytest.raises(AlignmentError, match="partially"):
            aggregate_psinet([u0], prev)

    def test_missing_shared_tensor_rejected(self):
        rng = np.random.default_rng(18)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["group0"])
        with pytest.raises(AlignmentError, match="shared"):
            aggregate_psinet([u0], prev)

    def test_stray_tensor_rejected(self):
        rng = np.random.default_rng(19)
        prev = _psi_global(rng)
        u0 = _psi_update(rng, 0, ["shared", "group0"])
        u0.params["group9/conv1.w"] = np.zeros((1,), dtype=np.float32)
        with pytest.raises(AlignmentError, match="unknown"):
            aggregate_psinet([u0], prev)

    def test_duplicate_node_ids_rejected(self):
        rng = np.random.default_rng(20)
        prev = _psi_global(rng)
        ups = [_psi_update(rng, 5, ["shared", "group0"]) for _ in range(2)]
        with pytest.raises(AlignmentError, match="duplicate"):
            aggregate_psinet(ups, prev)


def _small_data(seed=0):
    train = synthesize_dataset(samples_per_class=6, seed=seed, name="train")
    test = synthesize_dataset(samples_per_class=2, seed=seed + 1, name="test")
    return train, test


class TestLocalTrain:
    def test_deterministic_given_rng(self):
        train, _ = _small_data()
        spec = make_tiny10(norm="none")
        outs = []
        for _ in range(2):
            model = Model.init(spec, seed=3)
            local_train(
                model, train.images[:24], train.labels[:24],
                epochs=2, batch_size=8, lr=0.05,
                rng=node_rng(0, 1, 2),
            )
            outs.append(model.arrays())
        for name in outs[0]:
            assert np.array_equal(outs[0][name], outs[1][name])

    def test_prox_term_zero_mu_is_bitwise_plain_sgd(self):
        train, _ = _small_data()
        spec = make_tiny10(norm="none")
        plain = Model.init(spec, seed=4)
        local_train(
            plain, train.images[:24], train.labels[:24],
            epochs=1, batch_size=8, lr=0.05, rng=node_rng(0, 0, 0),
        )
        anchored = Model.init(spec, seed=4)
        anchor = {k: v.copy() for k, v in anchored.arrays().items()}
        local_train(
            anchored, train.images[:24], train.labels[:24],
            epochs=1, batch_size=8, lr=0.05, rng=node_rng(0, 0, 0),
            prox_mu=0.0, anchor=anchor,
        )
        a, b = plain.arrays(), anchored.arrays()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_prox_gradient_is_analytic(self):
        # one full-batch step lands on w0 - lr * (g + mu * (w0 - anchor))
        # where g is the plain data gradient at w0
        train, _ = _small_data()
        spec = make_tiny10(norm="none")
        lr, mu = 0.05, 0.7
        order = node_rng(1, 0, 0).permutation(16)
        xs, ys = train.images[:16][order], train.labels[:16][order]

        base = Model.init(spec, seed=5)
        w0 = {k: v.copy() for k, v in base.arrays().items()}
        rng_off = np.random.default_rng(9)
        anchor = {
            k: (v + rng_off.standard_normal(v.shape).astype(np.float32) * 0.01)
            for k, v in w0.items()
        }

        probe = Model(spec, {k: v.copy() for k, v in w0.items()})
        with Tape() as tape:
            loss = softmax_cross_entropy(probe.forward(xs, train=True), ys)
            tape.backward(loss)
        grads = {name: t.grad.copy() for name, t in probe.trainable().items()}

        prox = Model(spec, {k: v.copy() for k, v in w0.items()})
        local_train(
            prox, train.images[:16], train.labels[:16],
            epochs=1, batch_size=16, lr=lr, rng=node_rng(1, 0, 0),
            prox_mu=mu, anchor=anchor,
        )
        got = prox.arrays()
        for name, g in grads.items():
            want = w0[name].astype(np.float64) - lr * (
                g.astype(np.float64)
                + mu * (w0[name].astype(np.float64) - anchor[name].astype(np.float64))
            )
            assert rel_err(got[name], want) < 1e-6, name

    def test_prox_needs_anchor(self):
        train, _ = _small_data()
        model = Model.init(make_tiny10(norm="none"), seed=0)
        with pytest.raises(ConfigError, match="anchor"):
            local_train(
                model, train.images[:8], train.labels[:8],
                epochs=1, batch_size=8, lr=0.1, rng=node_rng(0, 0, 0), prox_mu=0.5,
            )

    def test_empty_shard_rejected(self):
        model = Model.init(make_tiny10(norm="none"), seed=0)
        with pytest.raises(ConfigError, match="empty"):
            local_train(
                model, np.zeros((0, 1, 16, 16), np.float32), np.zeros(0, np.int64),
                epochs=1, batch_size=8, lr=0.1, rng=node_rng(0, 0, 0),
            )


class TestConfigValidation:
    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="strategy"):
            FederationConfig(strategy="fedsgd", rounds=1, local_epochs=1, batch_size=8, lr=0.1)

    def test_prox_mu_requires_fedprox(self):
        with pytest.raises(ConfigError, match="prox_mu"):
            FederationConfig(
                strategy="fedavg", rounds=1, local_epochs=1, batch_size=8, lr=0.1, prox_mu=0.1
            )

    def test_positive_counts(self):
        with pytest.raises(ConfigError):
            FederationConfig(strategy="fedavg", rounds=0, local_epochs=1, batch_size=8, lr=0.1)
        with pytest.raises(ConfigError):
            FederationConfig(strategy="fedavg", rounds=1, local_epochs=1, batch_size=8, lr=-0.1)


def _loop_setup(strategy, trim=True, seed=0, rounds=2):
    train, test = _small_data(seed)
    parts = partition_by_classes(train, num_nodes=5, classes_per_node=2, seed=seed)
    if strategy == "psinet":
        spec = build_psinet(make_tiny10(norm="none"), default_mapping(10, 5), "conv0")
    else:
        spec = make_tiny10(norm="none")
    cfg = FederationConfig(
        strategy=strategy, rounds=rounds, local_epochs=1, batch_size=12,
        lr=0.05, seed=seed, trim=trim,
    )
    return spec, train, test, parts, cfg


class TestRunFederation:
    def test_record_shape_and_bytes(self):
        spec, train, test, parts, cfg = _loop_setup("fedavg")
        run = run_federation(
            spec, train.images, train.labels, test.images, test.labels, parts, cfg
        )
        assert len(run.records) == cfg.rounds * (len(parts) + 1)
        per_model = serialized_size(run.global_params)
        for rec in run.records:
            if rec.node_id is None:
                assert rec.bytes_up == len(parts) * per_model
                assert rec.bytes_down == len(parts) * per_model
            else:
                assert rec.bytes_up == per_model
                assert rec.bytes_down == per_model
            assert rec.wall_ms > 0
            assert 0.0 <= rec.accuracy <= 1.0
        assert len(run.provenance) == cfg.rounds

    def test_rerun_is_bitwise_identical(self):
        spec, train, test, parts, cfg = _loop_setup("psinet")
        runs = [
            run_federation(
                spec, train.images, train.labels, test.images, test.labels, parts, cfg
            )
            for _ in range(2)
        ]
        for name in runs[0].global_params:
            assert np.array_equal(runs[0].global_params[name], runs[1].global_params[name])
        for a, b in zip(runs[0].records, runs[1].records):
            assert (a.round, a.node_id, a.loss, a.accuracy, a.bytes_up, a.bytes_down) == (
                b.round, b.node_id, b.loss, b.accuracy, b.bytes_up, b.bytes_down
            )

    def test_trim_shrinks_node_traffic(self):
        spec, train, test, parts, cfg = _loop_setup("psinet", trim=True)
        run = run_federation(
            spec, train.images, train.labels, test.images, test.labels, parts, cfg
        )
        full = serialized_size(run.global_params)
        node_rows = [r for r in run.records if r.node_id is not None]
        assert all(r.bytes_up < full for r in node_rows)
        assert all(r.bytes_down < full for r in node_rows)

    def test_globally_absent_group_is_carried_every_round(self):
        train, test = _small_data()
        spec = build_psinet(make_tiny10(norm="none"), default_mapping(10, 5), "conv0")
        # nodes cover classes 0..7 only, so the (8, 9) group has no holder
        by_class = {c: np.flatnonzero(train.labels == c) for c in range(8)}
        parts = [
            np.concatenate([by_class[2 * i], by_class[2 * i + 1]]) for i in range(4)
        ]
        cfg = FederationConfig(
            strategy="psinet", rounds=2, local_epochs=1, batch_size=12, lr=0.05, seed=0
        )
        run = run_federation(
            spec, train.images, train.labels, test.images, test.labels, parts, cfg
        )
        init = Model.init(spec, seed=0).arrays()
        for prov in run.provenance:
            assert prov["group4"] == {"policy": "carried", "nodes": []}
            assert prov["shared"]["policy"] == "averaged"
        for name in run.global_params:
            if name.startswith("group4/"):
                assert np.array_equal(run.global_params[name], init[name])

    def test_fedprox_zero_mu_matches_fedavg_bitwise(self):
        spec, train, test, parts, _ = _loop_setup("fedavg")
        outs = {}
        for strategy in ("fedavg", "fedprox"):
            cfg = FederationConfig(
                strategy=strategy, rounds=2, local_epochs=1, batch_size=12, lr=0.05, seed=0
            )
            outs[strategy] = run_federation(
                spec, train.images, train.labels, test.images, test.labels, parts, cfg
            )
        for name in outs["fedavg"].global_params:
            assert np.array_equal(
                outs["fedavg"].global_params[name], outs["fedprox"].global_params[name]
            )

    def test_empty_shard_rejected(self):
        spec, train, test, parts, cfg = _loop_setup("fedavg")
        parts = parts[:-1] + [np.zeros(0, dtype=np.int64)]
        with pytest.raises(ConfigError, match="empty"):
            run_federation(
                spec, train.images, train.labels, test.images, test.labels, parts, cfg
            )

    def test_psinet_needs_grouped_spec(self):
        spec, train, test, parts, _ = _loop_setup("fedavg")
        cfg = FederationConfig(
            strategy="psinet", rounds=1, local_epochs=1, batch_size=12, lr=0.05, seed=0
        )
        with pytest.raises(ConfigError, match="group"):
            run_federation(
                spec, train.images, train.labels, test.images, test.labels, parts, cfg
            )


class TestSetupNodes:
    def test_matched_groups_follow_local_classes(self):
        train, _ = _small_data()
        spec = build_psinet(make_tiny10(norm="none"), default_mapping(10, 5), "conv0")
        parts = partition_by_classes(train, num_nodes=5, classes_per_node=2, seed=0)
        cfg = FederationConfig(
            strategy="psinet", rounds=1, local_epochs=1, batch_size=8, lr=0.1, seed=0
        )
        nodes = setup_nodes(spec, train.images, train.labels, parts, cfg)
        mapping = default_mapping(10, 5)
        for node in nodes:
            classes = set(np.unique(node.ys).tolist())
            want = tuple(
                sorted({mapping.group_of(c) for c in classes})
            )
            assert node.matched == want
            assert node.retained == want  # trim keeps exactly the matched groups

    def test_restrict_params_copies(self):
        spec = make_tiny10(norm="none")
        params = Model.init(spec, seed=0).arrays()
        got = restrict_params(params, spec)
        assert set(got) == {name for name, _ in param_schema(spec)}
        name = next(iter(got))
        got[name][...] = 0
        assert not np.array_equal(got[name], params[name])

    def test_restrict_params_missing_tensor(self):
        spec = make_tiny10(norm="none")
        params = Model.init(spec, seed=0).arrays()
        del params["shared/conv0.w"]
        with pytest.raises(AlignmentError, match="lacks"):
            restrict_params(params, spec)
