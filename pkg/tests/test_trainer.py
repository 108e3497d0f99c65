import math

import numpy as np
import pytest

from graphprune import autograd as ag
from graphprune.checkpoint import checkpoint_bytes
from graphprune.data import DataError, make_synthetic
from graphprune.graph import parse_model_description, uniform_ratios
from graphprune.trainer import (GraphPruningModel, NumericError, PlainNetwork, TrainConfig, evaluate, evaluate_config,
                                learning_rate, make_optimizer, predict_logits, recalibrate_bn, retrain, sample_ratios,
                                train, train_step)

from gradcheck import max_rel_error

GRID = TrainConfig().ratio_grid


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("grid", [(0.5, 0.9), (0.5, 0.3, 1.0), (0.0, 1.0), (0.5, 1.0, 1.2)])
def test_grid_invariants(grid):
    with pytest.raises(ValueError):
        TrainConfig(ratio_grid=grid)


def test_batch_size_invariant():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)


def test_cosine_schedule_ends_at_zero():
    cfg = TrainConfig(init_lr=0.1)
    assert learning_rate(cfg, 0, 100) == 0.1
    assert learning_rate(cfg, 100, 100) == pytest.approx(0.0, abs=1e-15)
    step = TrainConfig(init_lr=0.1, lr_schedule="step")
    assert learning_rate(step, 60, 100) == pytest.approx(0.01)


# -- ratio sampling ------------------------------------------------------------

def test_draws_on_grid_and_uniform(v1_reduced):
    rng = np.random.default_rng(0)
    n = 10_000
    draws = np.array([sample_ratios(rng, v1_reduced, GRID).free(v1_reduced) for _ in range(n)])
    assert set(np.unique(draws)) <= set(GRID)
    p = 1 / len(GRID)
    sigma = math.sqrt(n * p * (1 - p))
    for col in draws.T:
        counts = np.array([np.sum(col == r) for r in GRID])
        assert np.all(np.abs(counts - n * p) < 3 * sigma + 1)


def test_same_seed_same_draws(v1_reduced):
    a = [sample_ratios(np.random.default_rng(4), v1_reduced, GRID) for _ in range(1)]
    b = [sample_ratios(np.random.default_rng(4), v1_reduced, GRID) for _ in range(1)]
    assert a == b


# -- train step ----------------------------------------------------------------

def test_step_moves_aggregator_and_generators(v1_reduced, synth4):
    cfg = TrainConfig(seed=1)
    model = GraphPruningModel(v1_reduced, 4, cfg)
    before_g = [p.data.copy() for p in model.aggregator.parameters()]
    before_h = [p.data.copy() for p in model.hypernet.parameters()]
    images, labels = synth4[0].images[:32], synth4[0].labels[:32].astype(np.int64)
    loss = train_step(model, images, labels, uniform_ratios(v1_reduced, 0.5), make_optimizer(model, cfg))
    assert loss > 0
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_g, model.aggregator.parameters()))
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_h, model.hypernet.parameters()))


def test_initial_loss_bounded(v1_reduced, synth4):
    images, labels = synth4[0].images[:32], synth4[0].labels[:32].astype(np.int64)
    bound = math.log(4) + 5
    for seed in range(100):
        model = GraphPruningModel(v1_reduced, 4, TrainConfig(seed=seed))
        r = model.sample_ratios(np.random.default_rng(seed))
        with ag.no_grad():
            loss = ag.softmax_cross_entropy(model.forward(images, r), labels).item()
        assert np.isfinite(loss) and loss <= bound


def test_aggregator_gradient_on_two_node_graph():
    g = parse_model_description("0 conv 3 4 1 3 4\n1 conv 4 4 1 1 4\nedges:\n0 1\n")
    model = GraphPruningModel(g, 3, TrainConfig(seed=2, hypernet_hidden=4), dtype=np.float64)
    rng = np.random.default_rng(2)
    x = ag.Tensor(rng.standard_normal((4, 3, 4, 4)), dtype=np.float64)
    labels = np.array([0, 1, 2, 1])
    r = uniform_ratios(g, 0.5)

    def loss():
        return ag.softmax_cross_entropy(model.forward(x, r), labels)

    assert max_rel_error(loss, model.aggregator.parameters()) < 1e-4


def test_non_finite_loss_aborts(v1_reduced, synth4):
    cfg = TrainConfig(seed=0)
    model = GraphPruningModel(v1_reduced, 4, cfg)
    model.classifier[0].data[...] = np.nan
    with pytest.raises(NumericError):
        train_step(model, synth4[0].images[:8], synth4[0].labels[:8].astype(np.int64),
                   uniform_ratios(v1_reduced, 1.0), make_optimizer(model, cfg))


# -- training runs -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_loss_falls_over_five_epochs(seed, v1_reduced):
    data = make_synthetic(4, 320, 8, seed=seed)
    cfg = TrainConfig(epochs=5, seed=seed)
    history = train(GraphPruningModel(v1_reduced, 4, cfg), data, cfg)
    assert len(history) == 5 and history[-1] < history[0]


def test_zero_epochs_keeps_initialization(v1_reduced, synth4):
    cfg = TrainConfig(seed=3)
    fresh = GraphPruningModel(v1_reduced, 4, cfg)
    trained = GraphPruningModel(v1_reduced, 4, cfg)
    assert train(trained, synth4[0], cfg, epochs=0) == []
    assert checkpoint_bytes(fresh) == checkpoint_bytes(trained)


def test_same_seed_bit_identical(v1_reduced, synth4):
    cfg = TrainConfig(epochs=1, seed=5)
    a, b = GraphPruningModel(v1_reduced, 4, cfg), GraphPruningModel(v1_reduced, 4, cfg)
    train(a, synth4[0], cfg)
    train(b, synth4[0], cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_resume_continues_epoch_numbering(v1_reduced, synth4):
    cfg = TrainConfig(epochs=1, seed=6)
    a, b = GraphPruningModel(v1_reduced, 4, cfg), GraphPruningModel(v1_reduced, 4, cfg)
    for model in (a, b):
        train(model, synth4[0], cfg)
        train(model, synth4[0], cfg)
    assert a.epochs_completed == 2 and len(a.loss_history) == 2
    assert a.loss_history == b.loss_history and checkpoint_bytes(a) == checkpoint_bytes(b)


def test_empty_data_rejected(v1_reduced, synth4):
    cfg = TrainConfig()
    model = GraphPruningModel(v1_reduced, 4, cfg)
    with pytest.raises(DataError):
        train(model, synth4[0].subset(slice(0, 0)), cfg)
    with pytest.raises(DataError):
        recalibrate_bn(model, uniform_ratios(v1_reduced, 1.0), synth4[1].subset(slice(0, 0)))


# -- recalibration and evaluation --------------------------------------------

def test_single_batch_recalibration_matches_batch_stats(trained_v1, synth4):
    r = uniform_ratios(trained_v1.graph, 0.6)
    batch = synth4[1].subset(slice(0, 20))
    states = recalibrate_bn(trained_v1, r, batch)
    capture = {0: None}
    with ag.no_grad():
        trained_v1.forward(batch.images, r, mode="train", capture=capture)
    np.testing.assert_allclose(states[0].moving_mean, capture[0].mean(axis=(0, 2, 3)), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(states[0].moving_var, capture[0].var(axis=(0, 2, 3)), rtol=1e-5, atol=1e-7)


def test_recalibration_idempotent(trained_v1, synth4):
    r = uniform_ratios(trained_v1.graph, 0.5)
    first = {i: s.moving_mean.copy() for i, s in recalibrate_bn(trained_v1, r, synth4[1]).items()}
    again = recalibrate_bn(trained_v1, r, synth4[1])
    for i, s in again.items():
        np.testing.assert_array_equal(first[i], s.moving_mean)


def test_width_buckets_are_private(trained_v1, synth4):
    g = trained_v1.graph
    half, full = uniform_ratios(g, 0.5), uniform_ratios(g, 1.0)
    a = recalibrate_bn(trained_v1, half, synth4[1])[0]
    b = recalibrate_bn(trained_v1, full, synth4[1])[0]
    assert a is not b and a.moving_mean is not None
    assert a.channels != b.channels
    assert not np.allclose(a.moving_mean, b.moving_mean[:a.channels])


def test_eval_requires_recalibration(trained_v1, synth4):
    with pytest.raises(RuntimeError):
        evaluate(trained_v1, uniform_ratios(trained_v1.graph, 0.3), synth4[2])


def test_evaluation_deterministic_and_bounded(trained_v1, synth4):
    res = evaluate_config(trained_v1, uniform_ratios(trained_v1.graph, 0.7), synth4[1], synth4[2])
    assert res.recalibrated and 0 <= res.accuracy <= 1
    assert evaluate(trained_v1, res.ratios, synth4[2]) == res.accuracy


def test_constructed_perfect_labels(trained_v1, synth4):
    r = uniform_ratios(trained_v1.graph, 1.0)
    recalibrate_bn(trained_v1, r, synth4[1])
    ds = synth4[2]
    preds = predict_logits(trained_v1, r, ds.images).argmax(axis=1)
    relabeled = type(ds)(ds.images, preds.astype(np.uint8), ds.num_classes)
    assert evaluate(trained_v1, r, relabeled) == 1.0


def test_random_classifier_near_chance(v1_reduced):
    data = make_synthetic(4, 2000, 8, seed=9)
    rng = np.random.default_rng(9)
    shuffled = type(data)(data.images, rng.integers(0, 4, 2000).astype(np.uint8), 4)
    model = GraphPruningModel(v1_reduced, 4, TrainConfig(seed=9))
    acc = evaluate_config(model, uniform_ratios(v1_reduced, 1.0), shuffled.subset(slice(0, 200)), shuffled).accuracy
    assert abs(acc - 0.25) <= 0.03


def test_label_permutation_symmetry(trained_v1, synth4):
    r = uniform_ratios(trained_v1.graph, 0.8)
    base = evaluate_config(trained_v1, r, synth4[1], synth4[2]).accuracy
    perm = np.array([2, 0, 3, 1])
    w, b = trained_v1.classifier
    w.data[...] = w.data[:, np.argsort(perm)]
    b.data[...] = b.data[np.argsort(perm)]
    ds = synth4[2]
    permuted = type(ds)(ds.images, perm[ds.labels].astype(np.uint8), 4)
    assert evaluate(trained_v1, r, permuted) == base


def test_off_grid_ratio_has_no_bucket(trained_v1):
    with pytest.raises(ValueError):
        trained_v1.bucket(0.55)


def test_retrain_plain_network(v1_reduced, synth4):
    cfg = TrainConfig(epochs=1, seed=0)
    net = retrain(v1_reduced, uniform_ratios(v1_reduced, 0.5), synth4[0], cfg)
    assert isinstance(net, PlainNetwork) and net.epochs_completed == 1
    assert net.weights[0].shape[0] == 4
    acc = evaluate_config(net, None, synth4[1], synth4[2]).accuracy
    assert 0 <= acc <= 1
