import math
import warnings

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import MinMaxScaler

from fedguard.datasets import Dataset
from fedguard.models import (
    EmptyShardWarning,
    ModelSpec,
    SoftmaxRegression,
    TanhMLPClassifier,
    TrainConfig,
    backward,
    evaluate,
    forward_loss,
    init_params,
    input_gradient,
    local_train,
    sgd,
)
from oracles import finite_difference, softmax_ce_oracle

SPECS = [ModelSpec("logistic", 4, 3), ModelSpec("mlp", 3, 3, hidden=4)]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_param_counts():
    assert ModelSpec("logistic", 784, 10).n_params == 785 * 10
    assert ModelSpec("mlp", 64, 2, 32).n_params == 65 * 32 + 33 * 2


def test_zero_params_balanced_two_class_is_ln2():
    spec = ModelSpec("logistic", 3, 2)
    X = np.array([[0.1, 0.5, 0.9], [0.4, 0.2, 0.3]])
    loss, _ = forward_loss(spec, np.zeros(spec.n_params), (X, [0, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_loss_matches_scalar_oracle():
    spec = ModelSpec("logistic", 2, 2)
    W = [[0.3, -1.2], [0.8, 0.4]]
    b = [0.05, -0.1]
    X = [[0.2, 0.7], [0.9, 0.1], [0.5, 0.5]]
    y = [0, 1, 1]
    params = np.array([W[0][0], W[0][1], W[1][0], W[1][1]] + b)
    loss, _ = forward_loss(spec, params, (X, y))
    assert abs(loss - softmax_ce_oracle(W, b, X, y)) < 1e-10


def test_loss_decreases_with_margin():
    spec = ModelSpec("logistic", 1, 2)
    losses = [forward_loss(spec, np.array([0, 0, -m, m]), ([[1.0]], [1]))[0] for m in (0, 0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_dim_mismatch():
    spec = SPECS[0]
    with pytest.raises(ValueError):
        forward_loss(spec, np.zeros(3), ([[0.1] * 4], [0]))
    with pytest.raises(ValueError):
        backward(spec, np.zeros(spec.n_params + 1), ([[0.1] * 4], [0]))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_gradient_matches_finite_differences(spec, rng):
    for _ in range(100):
        params = rng.normal(size=spec.n_params)
        n = int(rng.integers(1, 6))
        X = rng.uniform(size=(n, spec.input_dim))
        y = rng.integers(0, spec.num_classes, size=n)
        fd = finite_difference(lambda p: forward_loss(spec, np.array(p), (X, y))[0], params.tolist())
        assert rel_err(backward(spec, params, (X, y)), fd) < 1e-4


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_input_gradient_matches_finite_differences(spec, rng):
    for _ in range(20):
        params = rng.normal(size=spec.n_params)
        x = rng.uniform(size=spec.input_dim)
        y = [int(rng.integers(spec.num_classes))]
        fd = finite_difference(lambda v: forward_loss(spec, params, ([v], y))[0], x.tolist())
        assert rel_err(input_gradient(spec, params, ([x], y))[0], fd) < 1e-4


def test_gradient_vanishes_at_separable_minimum():
    spec = ModelSpec("logistic", 2, 2)
    X = np.array([[0.1, 0.2], [0.2, 0.1], [0.8, 0.9], [0.9, 0.8]])
    y = np.array([0, 0, 1, 1])
    p = np.zeros(spec.n_params)
    for _ in range(5000):
        g = backward(spec, p, (X, y))
        if np.linalg.norm(g) < 1e-6:
            break
        p -= 50.0 * g
    assert np.linalg.norm(backward(spec, p, (X, y))) < 1e-6


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_duplicated_batch_same_gradient(spec, rng):
    params = rng.normal(size=spec.n_params)
    X = rng.uniform(size=(5, spec.input_dim))
    y = rng.integers(0, spec.num_classes, 5)
    g1 = backward(spec, params, (X, y))
    g2 = backward(spec, params, (np.vstack([X, X]), np.concatenate([y, y])))
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_full_batch_step_does_not_increase_loss(rng):
    for _ in range(50):
        spec = ModelSpec("logistic", int(rng.integers(1, 8)), int(rng.integers(2, 5)))
        X = rng.uniform(size=(20, spec.input_dim))
        y = rng.integers(0, spec.num_classes, 20)
        p = rng.normal(size=spec.n_params)
        before = forward_loss(spec, p, (X, y))[0]
        after = forward_loss(spec, p - 1e-3 * backward(spec, p, (X, y)), (X, y))[0]
        assert after <= before


def _shard(rng, n=40, d=4, c=3):
    return Dataset(rng.uniform(size=(n, d)), rng.integers(0, c, n), c)


class TestLocalTrain:
    def test_zero_lr(self, rng):
        spec = SPECS[0]
        delta = local_train(spec, rng.normal(size=spec.n_params), _shard(rng), TrainConfig(lr=0), rng)
        assert not delta.any()

    def test_single_step_closed_form(self, rng):
        spec = SPECS[0]
        start = rng.normal(size=spec.n_params)
        one = _shard(rng, n=1)
        delta = local_train(spec, start, one, TrainConfig(lr=0.1, batch_size=4), rng)
        np.testing.assert_allclose(delta, -0.1 * backward(spec, start, one), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_same_seed_bitwise(self, spec, rng):
        shard = _shard(rng, d=spec.input_dim)
        start = init_params(spec, np.random.default_rng(3))
        a = local_train(spec, start, shard, TrainConfig(batch_size=7), np.random.default_rng(9))
        b = local_train(spec, start, shard, TrainConfig(batch_size=7), np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
    def test_doubled_epochs_equal_chained_calls(self, spec, rng):
        shard = _shard(rng, d=spec.input_dim)
        start = init_params(spec, np.random.default_rng(3))
        two = sgd(spec, start, shard, TrainConfig(batch_size=8, local_epochs=2), np.random.default_rng(5))
        r = np.random.default_rng(5)
        mid = sgd(spec, start, shard, TrainConfig(batch_size=8), r)
        end = sgd(spec, mid, shard, TrainConfig(batch_size=8), r)
        assert two.tobytes() == end.tobytes()
        d2 = local_train(spec, start, shard, TrainConfig(batch_size=8, local_epochs=2), np.random.default_rng(5))
        r = np.random.default_rng(5)
        d1a = local_train(spec, start, shard, TrainConfig(batch_size=8), r)
        d1b = local_train(spec, start + d1a, shard, TrainConfig(batch_size=8), r)
        np.testing.assert_allclose(d2, d1a + d1b, rtol=1e-9, atol=1e-14)

    def test_empty_shard_warns(self, rng):
        spec = SPECS[0]
        empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
        with pytest.warns(EmptyShardWarning):
            delta = local_train(spec, np.ones(spec.n_params), empty, TrainConfig(), rng)
        assert not delta.any()


def test_evaluate():
    spec = ModelSpec("logistic", 2, 2)
    toy = Dataset([[0.1, 0.9], [0.2, 0.8], [0.9, 0.1], [0.8, 0.3]], [0, 0, 1, 1], 2)
    # logit_1 - logit_0 = 2 * (x0 - x1)
    params = np.array([-1.0, 1.0, 1.0, -1.0, 0.0, 0.0])
    assert evaluate(spec, params, toy) == 1.0
    spec10 = ModelSpec("logistic", 3, 10)
    ten = Dataset(np.full((20, 3), 0.5), np.repeat(np.arange(10), 2), 10)
    assert evaluate(spec10, np.zeros(spec10.n_params), ten) == 0.1
    with pytest.raises(ValueError):
        evaluate(spec, params, Dataset(np.zeros((0, 2)), np.zeros(0, int), 2))


def _blobs(rng, n=60):
    centers = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]])
    y = np.repeat(np.arange(3), n // 3)
    X = np.clip(centers[y] + rng.normal(0, 0.05, size=(n, 2)), 0, 1)
    return X, np.array(["a", "b", "c"])[y]


@pytest.mark.parametrize("est", [SoftmaxRegression(lr=0.5, epochs=100), TanhMLPClassifier(lr=0.5, epochs=100)])
def test_classifier_estimators(est, rng):
    X, y = _blobs(rng)
    clf = clone(est).fit(X, y)
    assert set(clf.predict(X)) <= {"a", "b", "c"}
    assert clf.score(X, y) > 0.9
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)
    assert clone(est).get_params() == est.get_params()


def test_classifier_in_pipeline(rng):
    X, y = _blobs(rng, 90)
    pipe = make_pipeline(MinMaxScaler(), SoftmaxRegression(lr=0.5, epochs=60))
    assert cross_val_score(pipe, X * 40 - 7, y, cv=3).mean() > 0.9
