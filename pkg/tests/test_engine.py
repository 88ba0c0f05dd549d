import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from growprune.data import Dataset, synthetic_blobs
from growprune.engine import (GradientStats, GrowthConfig, PruneConfig, accumulate_gradients,
                              check_recoverable, drop_unreachable, grow_connections, nearest_rank,
                              nonrecoverable_prune, percentile_threshold, prune_step, recoverable_prune)
from growprune.errors import DimensionError, InputError
from growprune.network import build_model, model_forward, sparsity_report
from growprune.tensor import SgdConfig
from growprune.training import Trainer, correct_count, evaluate


# -- brute-force oracles ------------------------------------------------------------

def oracle_percentile(values, p):
    ordered = sorted(float(v) for v in np.ravel(values))
    rank = max(1, math.ceil(p * len(ordered) / 100 - 1e-12))
    return ordered[rank - 1]


def oracle_grow(mask, stat, alpha):
    thr = oracle_percentile(stat, alpha)
    return [(i, j) for i in range(mask.shape[0]) for j in range(mask.shape[1])
            if mask[i, j] == 0 and stat[i, j] >= thr]


def oracle_prune(mask, weight, beta, keep_neurons=True):
    """Sort-and-scan over active positions of a 2-d layer."""
    active = [(abs(float(weight[i, j])), i * mask.shape[1] + j)
              for i in range(mask.shape[0]) for j in range(mask.shape[1]) if mask[i, j]]
    if len(active) <= 1:
        return []
    thr = oracle_percentile([a for a, _ in active], beta)
    quota = max(1, math.ceil(beta * len(active) / 100 - 1e-12))
    rows = [int(mask[i].sum()) for i in range(mask.shape[0])]
    cols = [int(mask[:, j].sum()) for j in range(mask.shape[1])]
    removed = []
    for mag, flat in sorted(active):
        if mag > thr or len(removed) == quota:
            break
        i, j = divmod(flat, mask.shape[1])
        if keep_neurons and (rows[i] <= 1 or cols[j] <= 1):
            continue
        rows[i] -= 1
        cols[j] -= 1
        removed.append(flat)
    return sorted(removed)


def oracle_recoverable(model):
    """Adjacency scan: every node of every layer boundary has an edge on each side it needs."""
    bad = 0
    for layer in model.layers:
        adj = layer.mask.reshape(layer.out_units, layer.in_units, -1).any(axis=2)
        for o in range(adj.shape[0]):
            bad += not any(adj[o, i] for i in range(adj.shape[1]))
        for i in range(adj.shape[1]):
            bad += not any(adj[o, i] for o in range(adj.shape[0]))
    return bad == 0


def single_layer(weight, mask):
    model = build_model("mlp", widths=[weight.shape[1], weight.shape[0]])
    model.layers[0].weight[:] = weight * mask
    model.layers[0].mask[:] = mask
    return model


# -- percentile ---------------------------------------------------------------------

def test_nearest_rank_exact():
    assert nearest_rank(4, 50) == 2
    assert nearest_rank(100, 4) == 4
    assert nearest_rank(10, 0) == 1
    assert nearest_rank(3, 0.1) == 1
    # 100 * 0.07 is not exactly 7 in binary floating point
    assert nearest_rank(100, 7) == 7


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60),
       st.floats(0, 99.99))
def test_percentile_matches_sort(values, p):
    assert percentile_threshold(np.array(values), p) == oracle_percentile(values, p)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=50),
       st.floats(0, 99.9), st.integers(0, 1000), st.floats(0.01, 100))
def test_percentile_permutation_invariant_and_scale_equivariant(values, p, seed, c):
    v = np.array(values)
    perm = np.random.default_rng(seed).permutation(v)
    assert percentile_threshold(perm, p) == percentile_threshold(v, p)
    assert percentile_threshold(c * v, p) == pytest.approx(c * percentile_threshold(v, p), rel=1e-12)


def test_percentile_errors():
    with pytest.raises(InputError):
        percentile_threshold(np.array([]), 10)
    with pytest.raises(InputError):
        percentile_threshold(np.array([1.0]), 100)


# -- gradient accumulation and growth --------------------------------------------------

def test_accumulate_gradients_does_not_mutate(blobs):
    train, _ = blobs
    model = build_model("mlp", "sparse", 0.5, 0, widths=[2, 16, 3])
    before = [(l.weight.tobytes(), l.mask.tobytes(), l.bias.tobytes()) for l in model.layers]
    stats = accumulate_gradients(model, train, batch_size=32)
    after = [(l.weight.tobytes(), l.mask.tobytes(), l.bias.tobytes()) for l in model.layers]
    assert before == after
    assert stats.batches == math.ceil(len(train) / 32)
    assert all(s.dtype == np.float64 for s in stats.mean_abs)
    # dangling positions carry a signal
    assert any((s[l.mask == 0] > 0).any() for s, l in zip(stats.mean_abs, model.layers))


def test_grow_example_two_by_two():
    model = single_layer(np.array([[0.3, 0.2], [0.1, 0.4]], np.float32), np.array([[0, 1], [1, 1]], np.uint8))
    stat = np.array([[0.9, 0.5], [0.1, 0.05]])
    report = grow_connections(model, GradientStats([stat], [stat], 1), GrowthConfig(alpha=50),
                              learning_rate=0.02)
    assert report.thresholds == [0.1]
    assert report.grown == [1]
    assert model.layers[0].mask[0, 0] == 1
    assert model.layers[0].weight[0, 0] == pytest.approx(0.02 * 0.9)


def test_grow_descent_sign():
    model = single_layer(np.ones((1, 2), np.float32), np.array([[0, 1]], np.uint8))
    stat = GradientStats([np.array([[0.5, 0.1]])], [np.array([[-0.5, 0.1]])], 1)
    grow_connections(model, stat, GrowthConfig(alpha=10, init_sign="descent"), learning_rate=0.1)
    assert model.layers[0].weight[0, 0] == pytest.approx(0.05)


def test_grow_alpha_zero_activates_everything(blobs):
    train, _ = blobs
    model = build_model("mlp", "sparse", 0.6, 1, widths=[2, 10, 3])
    stats = accumulate_gradients(model, train)
    grow_connections(model, stats, GrowthConfig(alpha=0), learning_rate=0.01)
    assert model.is_dense()


def test_grow_needs_learning_rate_and_matching_stats():
    model = single_layer(np.ones((2, 2), np.float32), np.ones((2, 2), np.uint8))
    stats = GradientStats([np.ones((2, 2))], [np.ones((2, 2))], 1)
    with pytest.raises(InputError):
        grow_connections(model, stats, GrowthConfig())
    with pytest.raises(DimensionError):
        grow_connections(model, GradientStats([np.ones((3, 2))], [np.ones((3, 2))], 1), GrowthConfig(), 0.1)


def test_growth_config_validation():
    for bad in (dict(alpha=100), dict(alpha=-1), dict(scope="x"), dict(init_sign="x"), dict(interval=0)):
        with pytest.raises(InputError):
            GrowthConfig(**bad)


def test_global_scope_uses_one_threshold():
    model = build_model("mlp", "sparse", 0.5, 2, widths=[4, 4, 2])
    stats = GradientStats([np.full((4, 4), 1.0), np.full((2, 4), 0.1)],
                          [np.full((4, 4), 1.0), np.full((2, 4), 0.1)], 1)
    report = grow_connections(model, stats, GrowthConfig(alpha=60, scope="global"), 0.1)
    assert report.thresholds[0] == report.thresholds[1] == 1.0
    assert report.grown[1] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 99))
def test_grow_never_deactivates_and_keeps_consistency(seed, alpha):
    r = np.random.default_rng(seed)
    model = build_model("mlp", "sparse", 0.4, seed % 997, widths=[6, 5, 3])
    before = [l.mask.copy() for l in model.layers]
    stats = [np.abs(r.normal(size=l.weight.shape)) for l in model.layers]
    grow_connections(model, GradientStats(stats, stats, 1), GrowthConfig(alpha=alpha), 0.05)
    for l, b in zip(model.layers, before):
        assert (l.mask >= b).all()
        assert not l.weight[l.mask == 0].any()


# -- pruning -------------------------------------------------------------------------------

def test_prune_uniform_magnitudes_removes_four_smallest():
    w = (np.arange(1, 101, dtype=np.float32) / 100).reshape(10, 10)
    model = single_layer(w, np.ones((10, 10), np.uint8))
    report = prune_step(model, PruneConfig(beta=4))
    assert report.pruned == [4]
    assert sorted(np.flatnonzero(model.layers[0].mask.ravel() == 0)) == [0, 1, 2, 3]


def test_prune_never_orphans_single_input():
    w = np.array([[0.001, 0.0], [0.5, 0.6]], np.float32)
    mask = np.array([[1, 0], [1, 1]], np.uint8)
    model = single_layer(w, mask)
    prune_step(model, PruneConfig(beta=50))
    assert model.layers[0].mask[0, 0] == 1


def test_prune_ties_break_by_flat_index():
    model = single_layer(np.full((5, 4), 0.3, np.float32), np.ones((5, 4), np.uint8))
    report = prune_step(model, PruneConfig(beta=5))
    assert report.pruned == [nearest_rank(20, 5)] == [1]
    assert np.flatnonzero(model.layers[0].mask.ravel() == 0).tolist() == [0]


def test_prune_single_connection_layer_warns():
    model = single_layer(np.array([[0.5, 0.0]], np.float32), np.array([[1, 0]], np.uint8))
    report = prune_step(model, PruneConfig(beta=50))
    assert report.pruned == [0]
    assert report.warnings and "layer 0" in report.warnings[0]


def test_prune_config_validation():
    for bad in (dict(beta=0), dict(beta=100), dict(recovery_epochs=0), dict(accuracy_slack=-1),
                dict(min_retrain_epochs=20)):
        with pytest.raises(InputError):
            PruneConfig(**bad)


def _random_layer(r):
    o, i = int(r.integers(2, 25)), int(r.integers(2, 40))
    mask = (r.random((o, i)) < r.uniform(0.2, 1.0)).astype(np.uint8)
    # round magnitudes so ties occur
    weight = np.round(r.normal(size=(o, i)), int(r.integers(1, 3))).astype(np.float32)
    return weight * mask, mask


def test_grow_and_prune_match_sort_and_scan_oracle():
    r = np.random.default_rng(2024)
    for _ in range(200):
        weight, mask = _random_layer(r)
        beta = float(r.choice([1, 3, 4, 5, 12.5, 50]))
        model = single_layer(weight, mask)
        prune_step(model, PruneConfig(beta=beta))
        got = np.flatnonzero((mask.ravel() == 1) & (model.layers[0].mask.ravel() == 0)).tolist()
        assert got == oracle_prune(mask, weight, beta)

        stat = np.round(np.abs(r.normal(size=mask.shape)), 2)
        alpha = float(r.choice([0, 30, 40, 50, 99]))
        model = single_layer(weight, mask)
        grow_connections(model, GradientStats([stat], [stat], 1), GrowthConfig(alpha=alpha), 0.1)
        new = np.argwhere((mask == 0) & (model.layers[0].mask == 1))
        assert [tuple(p) for p in new] == oracle_grow(mask, stat, alpha)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1, 60))
def test_prune_never_activates_and_keeps_consistency(seed, beta):
    model = build_model("mlp", "sparse", 0.6, seed % 991, widths=[7, 6, 4])
    before = [l.mask.copy() for l in model.layers]
    was_ok = check_recoverable(model)[0]
    prune_step(model, PruneConfig(beta=beta))
    for l, b in zip(model.layers, before):
        assert (l.mask <= b).all()
        assert not l.weight[l.mask == 0].any()
    assert check_recoverable(model)[0] == was_ok


# -- recoverability -----------------------------------------------------------------------

def test_dense_model_is_recoverable():
    assert check_recoverable(build_model("lenet300100"))[0]
    assert check_recoverable(build_model("lenet5"))[0]


def test_cleared_neuron_is_named():
    model = build_model("mlp", widths=[5, 4, 3])
    model.layers[0].mask[2, :] = 0
    ok, violations = check_recoverable(model)
    assert not ok
    assert any("layer 0 output unit 2" in v for v in violations)


def test_conv_filter_without_kernel_weights():
    model = build_model("lenet5")
    model.layers[1].mask[3] = 0
    ok, violations = check_recoverable(model)
    assert not ok and any("layer 1 output unit 3" in v for v in violations)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_check_recoverable_matches_adjacency_scan(seed):
    r = np.random.default_rng(seed)
    model = build_model("mlp", widths=[int(r.integers(2, 8)), int(r.integers(2, 8)), int(r.integers(2, 5))])
    for layer in model.layers:
        layer.mask[:] = r.random(layer.mask.shape) < r.uniform(0.2, 0.9)
    assert check_recoverable(model)[0] == oracle_recoverable(model)


# -- pruning loops --------------------------------------------------------------------------

def _frozen_trainer():
    return Trainer(SgdConfig(0.0, 0.0, 0.0), batch_size=8, seed=0)


def test_recoverable_prune_immediate_rollback():
    model = single_layer(np.array([[1.0, -0.9], [-0.9, 1.0]], np.float32), np.ones((2, 2), np.uint8))
    data = Dataset(np.array([[1.0, 1.05], [1.0, 0.0]], np.float32), np.array([1, 0]), class_count=2)
    assert evaluate(model, data) == 0.0
    before = model.copy()
    out, reports = recoverable_prune(model, data, data, PruneConfig(beta=25, recovery_epochs=2),
                                     _frozen_trainer())
    assert len(reports) == 1 and reports[0].rolled_back
    assert reports[0].retrain_epochs == 2
    for a, b in zip(out.layers, before.layers):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.weight, b.weight)


def test_recoverable_prune_shrinks_overparameterized_toy():
    data = synthetic_blobs(class_count=2, per_class=5, dim=2, separation=10.0, seed=4)
    model = build_model("mlp", seed=0, widths=[2, 100, 2])
    trainer = Trainer(SgdConfig(0.05, 0.9, 0.0), batch_size=10, seed=0)
    for _ in range(30):
        trainer.train_epoch(model, data)
    assert evaluate(model, data) == 0.0
    start = sparsity_report(model).active_weights
    out, reports = recoverable_prune(model, data, data, PruneConfig(beta=5, recovery_epochs=3), trainer)
    assert sparsity_report(out).active_weights < start
    assert evaluate(out, data) == 0.0
    assert check_recoverable(out)[0]


def test_recoverable_prune_needs_val():
    model = build_model("mlp", widths=[2, 2])
    empty = Dataset(np.zeros((0, 2), np.float32), np.zeros(0, int), class_count=2)
    with pytest.raises(InputError):
        recoverable_prune(model, empty, empty)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([3.0, 4.0, 5.0, 20.0]), st.integers(0, 1))
def test_recoverable_prune_keeps_accuracy_and_structure(seed, beta, min_epochs):
    data = synthetic_blobs(class_count=3, per_class=30, dim=2, separation=4.0, seed=seed)
    train, val = data.subset(np.arange(60)), data.subset(np.arange(60, 90))
    model = build_model("mlp", "sparse", 0.6, seed, widths=[2, 12, 3])
    trainer = Trainer(SgdConfig(0.05, 0.9, 0.0), batch_size=16, seed=seed)
    for _ in range(5):
        trainer.train_epoch(model, train)
    ref = correct_count(model, val)
    cfg = PruneConfig(beta=beta, recovery_epochs=2, max_iterations=40, min_retrain_epochs=min_epochs)
    out, _ = recoverable_prune(model, train, val, cfg, trainer)
    assert check_recoverable(out)[0]
    assert correct_count(out, val) >= ref


def test_nonrecoverable_slack_zero_matches_recoverable(blobs):
    train, val = blobs
    base = build_model("mlp", "sparse", 0.5, 3, widths=[2, 16, 3])
    t = Trainer(SgdConfig(0.05, 0.9, 0.0), batch_size=16, seed=3)
    for _ in range(5):
        t.train_epoch(base, train)
    cfg = PruneConfig(beta=10, recovery_epochs=2, accuracy_slack=0.0, max_iterations=30)
    a, _ = recoverable_prune(base.copy(), train, val, cfg, t.clone())
    b, _ = nonrecoverable_prune(base.copy(), train, val, cfg, t.clone(), keep_neurons=True)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.mask, lb.mask)
    assert b.meta["deploy_only"] and b.meta["recoverable"] is False


def test_nonrecoverable_prune_goes_further(blobs):
    train, val = blobs
    base = build_model("mlp", seed=5, widths=[2, 20, 3])
    t = Trainer(SgdConfig(0.05, 0.9, 0.0), batch_size=16, seed=5)
    for _ in range(10):
        t.train_epoch(base, train)
    cfg = PruneConfig(beta=10, recovery_epochs=2, max_iterations=200)
    rec, _ = recoverable_prune(base, train, val, cfg, t)
    ref = correct_count(rec, val)
    slack = PruneConfig(beta=10, recovery_epochs=2, accuracy_slack=0.05, max_iterations=200)
    comp, _ = nonrecoverable_prune(rec.copy(), train, val, slack, t.clone())
    assert sparsity_report(comp).active_weights <= sparsity_report(rec).active_weights
    assert correct_count(comp, val) >= ref - math.floor(0.05 * len(val))


def test_drop_unreachable_preserves_predictions(rng):
    model = build_model("mlp", "sparse", 0.5, 11, widths=[6, 8, 5, 3])
    # hidden unit 2 of the second hidden layer loses every outgoing connection
    model.layers[2].mask[:, 2] = 0
    model.layers[2].weight[:, 2] = 0
    x = rng.normal(size=(10, 6)).astype(np.float32)
    before = model_forward(model, x, keep_cache=False)
    removed = drop_unreachable(model)
    assert (1, 2) in removed
    assert not model.layers[1].mask[2].any()
    np.testing.assert_allclose(model_forward(model, x, keep_cache=False), before, atol=1e-6)
