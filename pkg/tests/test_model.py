import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, random_labels, random_model, rel_err
from perturb_learn.model import (Model, TrainingDiverged, forward, grad_input, grad_params,
                                 init_model, load_model, loss, mean_loss, predict, save_model,
                                 train)
from perturb_learn.numerics import OptimConfig

ARCHS = [((), "logistic", 2), ((), "exponential", 2), ((), "cross_entropy", 4),
         ((7,), "logistic", 2), ((6, 5), "cross_entropy", 3), ((8,), "exponential", 2)]


def _smooth_inputs(model, X, rng):
    # keep finite differences away from ReLU kinks
    for _ in range(50):
        if not model.hidden:
            return X
        h, ok = X, True
        for w, b in zip(model.weights[:-1], model.biases[:-1]):
            a = h @ w + b
            ok &= np.min(np.abs(a)) > 1e-3
            h = np.maximum(a, 0)
        if ok:
            return X
        X = rng.standard_normal(X.shape)
    return X


@pytest.mark.parametrize("hidden, kind, C", ARCHS)
def test_grad_params_matches_finite_differences(rng, hidden, kind, C):
    for _ in range(4):
        d = int(rng.integers(2, 12))
        m = random_model(rng, d, kind, hidden, C)
        X = _smooth_inputs(m, rng.standard_normal((5, d)), rng)
        y = random_labels(rng, m, 5)
        g = grad_params(m, X, y)
        for i, p in enumerate(m.params):
            def f(v, i=i):
                ps = list(m.params)
                ps[i] = v
                return mean_loss(m.with_params(ps), X, y)
            assert rel_err(g[i], central_diff(f, p)) < 1e-4


@pytest.mark.parametrize("hidden, kind, C", ARCHS)
def test_grad_input_matches_finite_differences(rng, hidden, kind, C):
    for _ in range(4):
        d = int(rng.integers(2, 12))
        m = random_model(rng, d, kind, hidden, C)
        x = _smooth_inputs(m, rng.standard_normal((1, d)), rng)[0]
        y = random_labels(rng, m, 1)[0]
        assert rel_err(grad_input(m, x, y), central_diff(lambda v: loss(m, v, y), x)) < 1e-4


def test_grad_input_batch_rows_are_per_sample(rng):
    m = random_model(rng, 6, "cross_entropy", (5,), 3)
    X = rng.standard_normal((4, 6))
    y = random_labels(rng, m, 4)
    G = grad_input(m, X, y)
    for i in range(4):
        assert np.allclose(G[i], grad_input(m, X[i], y[i]), rtol=1e-12, atol=1e-15)


def test_linear_logistic_closed_form(rng):
    m = random_model(rng, 5, "logistic")
    x = rng.standard_normal(5)
    w, b = m.weights[0][:, 0], m.biases[0][0]
    f = x @ w + b
    for y in (-1, 1):
        s = 1.0 / (1.0 + np.exp(y * f))
        assert np.allclose(grad_input(m, x, y), -y * s * w, rtol=1e-12)
        assert np.isclose(loss(m, x, y), np.log1p(np.exp(-y * f)), rtol=1e-12)


def test_linear_exponential_closed_form(rng):
    m = random_model(rng, 4, "exponential")
    x = rng.standard_normal(4)
    w, b = m.weights[0][:, 0], m.biases[0][0]
    f = x @ w + b
    assert np.allclose(grad_input(m, x, 1), -np.exp(-f) * w, rtol=1e-12)


@pytest.mark.parametrize("kind, value", [("exponential", 1.0), ("logistic", np.log(2.0)),
                                         ("cross_entropy", np.log(5.0))])
def test_loss_at_zero_logits(kind, value):
    m = init_model(3, loss_kind=kind, n_classes=5 if kind == "cross_entropy" else 2, zero=True)
    y = 1 if kind != "cross_entropy" else 2
    assert np.isclose(loss(m, np.ones(3), y), value, rtol=1e-14)


def test_logistic_loss_large_margin_is_finite():
    m = init_model(1, zero=True)
    m = m.with_params([np.array([[1.0]]), np.array([0.0])])
    assert np.isclose(loss(m, [800.0], -1), 800.0)
    assert loss(m, [800.0], 1) == 0.0


def test_forward_shapes(rng):
    m = random_model(rng, 4, "cross_entropy", (3,), 3)
    assert forward(m, np.zeros(4)).shape == (3,)
    assert forward(m, np.zeros((2, 4))).shape == (2, 3)
    b = random_model(rng, 4, "logistic")
    assert np.ndim(forward(b, np.zeros(4))) == 0
    assert forward(b, np.zeros((2, 4))).shape == (2,)


def test_predict_ties():
    b = init_model(2, zero=True)
    assert predict(b, [0.3, 0.1]) == -1
    c = init_model(2, loss_kind="cross_entropy", n_classes=3, zero=True)
    assert predict(c, [1.0, 1.0]) == 0
    assert list(predict(c, np.zeros((2, 2)))) == [0, 0]


def test_init_bounds():
    m = init_model(100, hidden=(50,), seed=3)
    assert np.max(np.abs(m.weights[0])) <= 0.1
    assert np.max(np.abs(m.weights[1])) <= 1 / np.sqrt(50)
    assert np.max(np.abs(m.weights[0])) > 0.09


def test_init_deterministic():
    a, b = init_model(5, hidden=(3,), seed=9), init_model(5, hidden=(3,), seed=9)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


@pytest.mark.parametrize("bad", [dict(loss_kind="hinge"), dict(loss_kind="cross_entropy", n_classes=1)])
def test_invalid_model(bad):
    with pytest.raises(ValueError):
        init_model(3, **bad)


def test_label_validation(rng):
    b = random_model(rng, 2, "logistic")
    with pytest.raises(ValueError):
        loss(b, [0.0, 0.0], 0)
    c = random_model(rng, 2, "cross_entropy", n_classes=3)
    with pytest.raises(ValueError):
        loss(c, [0.0, 0.0], 3)
    with pytest.raises(ValueError):
        forward(c, np.zeros(5))


def _blobs(rng, n=200, d=3, sep=3.0):
    y = rng.choice([-1, 1], n)
    return rng.standard_normal((n, d)) + sep * y[:, None], y


def test_train_epochs_zero_returns_init(rng):
    m = random_model(rng, 3, "logistic")
    X, y = _blobs(rng)
    out = train(m, (X, y), OptimConfig(epochs=0))
    assert out is m


def test_train_deterministic(rng):
    X, y = _blobs(rng)
    m = init_model(3, hidden=(4,), seed=1)
    a = train(m, (X, y), OptimConfig("adam", lr=0.01, epochs=3, seed=5))
    b = train(m, (X, y), OptimConfig("adam", lr=0.01, epochs=3, seed=5))
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert a.trace == b.trace


def test_train_separable_reaches_full_accuracy(rng):
    X, y = _blobs(rng, sep=4.0)
    m = train(init_model(3, seed=0), (X, y), OptimConfig(lr=0.5, epochs=30, batch_size=200))
    assert np.mean(predict(m, X) == y) == 1.0


def test_full_batch_gd_trace_non_increasing(rng):
    X, y = _blobs(rng, sep=1.0)
    m = train(init_model(3, seed=0), (X, y), OptimConfig(lr=0.1, epochs=50, batch_size=200))
    assert len(m.trace) == 50
    assert np.all(np.diff(m.trace) <= 1e-12)


def test_train_diverges_loudly(rng):
    X, y = _blobs(rng)
    with pytest.raises(TrainingDiverged):
        train(init_model(3, loss_kind="exponential", seed=0), (X * 1e3, y),
              OptimConfig(lr=1e6, epochs=5))


def test_checkpoint_round_trip(tmp_path, rng):
    m = random_model(rng, 5, "cross_entropy", (4, 3), 3)
    m = train(m, (rng.standard_normal((30, 5)), rng.integers(0, 3, 30)), OptimConfig(epochs=2))
    save_model(m, tmp_path / "m.npz")
    r = load_model(tmp_path / "m.npz")
    assert isinstance(r, Model)
    assert r.arch == m.arch and r.hidden == m.hidden and r.trace == m.trace
    assert all(np.array_equal(p, q) for p, q in zip(m.params, r.params))


def test_load_rejects_foreign_npz(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_model(tmp_path / "x.npz")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_binary_prediction_invariant_to_positive_scaling(seed, s):
    rng = np.random.default_rng(seed)
    m = init_model(4, seed=seed)
    X = rng.standard_normal((10, 4))
    scaled = m.with_params([p * s for p in m.params])
    assert np.array_equal(predict(m, X), predict(scaled, X))
