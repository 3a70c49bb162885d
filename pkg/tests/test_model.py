from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.optimize import minimize

from feddisco.model import (
    ModelParams,
    ModelShape,
    TrainerConfig,
    accuracy,
    gradient,
    init_params,
    local_train,
    loss,
    per_class_accuracy,
    zeros,
)
from feddisco.partition import LabeledDataset, synth_gaussian_mixture


def _batch(rng, m, F, C):
    return LabeledDataset(rng.standard_normal((m, F)), rng.integers(0, C, m), C)


def _fd_gradient(params, batch, anchor=None, prox_mu=0.0, h=1e-5):
    def f(v):
        p = ModelParams(v, params.shape)
        val = loss(p, batch)
        if prox_mu > 0:
            val += 0.5 * prox_mu * float(np.sum((v - anchor.values) ** 2))
        return val

    out = np.zeros(params.values.size)
    for i in range(out.size):
        e = np.zeros_like(out)
        e[i] = h
        out[i] = (f(params.values + e) - f(params.values - e)) / (2 * h)
    return out


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_shape_sizes():
    assert ModelShape(3, 2).size == 3 * 2 + 2
    assert ModelShape(3, 2, hidden=4).size == 3 * 4 + 4 + 4 * 2 + 2


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(np.zeros(3), ModelShape(3, 2))
    with pytest.raises(ValueError):
        ModelParams(np.full(8, np.nan), ModelShape(3, 2))


@pytest.mark.parametrize("C", [2, 10])
def test_zero_params_loss_is_log_C(C):
    rng = np.random.default_rng(0)
    batch = _batch(rng, 17, 4, C)
    assert loss(zeros(ModelShape(4, C)), batch) == pytest.approx(math.log(C), abs=1e-12)


def test_loss_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        loss(zeros(ModelShape(3, 2)), _batch(rng, 5, 4, 2))


@pytest.mark.parametrize("hidden", [0, 5])
def test_gradient_matches_finite_differences(hidden):
    rng = np.random.default_rng(123 + hidden)
    for _ in range(20):
        F, C = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        shape = ModelShape(F, C, hidden)
        params = ModelParams(rng.normal(0, 0.5, shape.size), shape)
        batch = _batch(rng, int(rng.integers(1, 12)), F, C)
        assert _rel_err(gradient(params, batch), _fd_gradient(params, batch)) < 1e-4


def test_gradient_small_example():
    rng = np.random.default_rng(5)
    shape = ModelShape(2, 3)
    params = ModelParams(rng.normal(size=shape.size), shape)
    batch = _batch(rng, 6, 2, 3)
    assert _rel_err(gradient(params, batch), _fd_gradient(params, batch)) < 1e-4


def test_prox_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    shape = ModelShape(3, 4)
    params = ModelParams(rng.normal(size=shape.size), shape)
    anchor = ModelParams(rng.normal(size=shape.size), shape)
    batch = _batch(rng, 8, 3, 4)
    g = gradient(params, batch, anchor, prox_mu=2.5)
    assert _rel_err(g, _fd_gradient(params, batch, anchor, 2.5)) < 1e-4


def test_prox_disabled_ignores_anchor():
    rng = np.random.default_rng(1)
    shape = ModelShape(3, 2)
    params = ModelParams(rng.normal(size=shape.size), shape)
    batch = _batch(rng, 5, 3, 2)
    a1 = ModelParams(rng.normal(size=shape.size), shape)
    a2 = ModelParams(rng.normal(size=shape.size), shape)
    np.testing.assert_array_equal(gradient(params, batch, a1, 0.0), gradient(params, batch, a2, 0.0))


def test_prox_vanishes_at_anchor():
    rng = np.random.default_rng(2)
    shape = ModelShape(3, 2)
    params = ModelParams(rng.normal(size=shape.size), shape)
    batch = _batch(rng, 5, 3, 2)
    np.testing.assert_array_equal(gradient(params, batch, params, 10.0), gradient(params, batch))


def test_prox_requires_anchor():
    rng = np.random.default_rng(3)
    shape = ModelShape(3, 2)
    with pytest.raises(ValueError):
        gradient(zeros(shape), _batch(rng, 4, 3, 2), None, 1.0)


def test_trainer_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(tau=0)
    with pytest.raises(ValueError):
        TrainerConfig(tau=None, epochs=None)
    assert TrainerConfig(epochs=2, batch_size=64).steps_for(130) == 2 * 3
    assert TrainerConfig(tau=7).steps_for(130) == 7


def test_zero_learning_rate_returns_init():
    data = synth_gaussian_mixture(2, 2, [20, 20], 4.0, seed=0)
    init = init_params(ModelShape(2, 2), seed=1)
    out = local_train(init, data, TrainerConfig(eta=0.0, tau=1))
    np.testing.assert_array_equal(out.values, init.values)


def test_local_train_deterministic():
    data = synth_gaussian_mixture(3, 2, [30, 30, 30], 3.0, seed=0)
    init = init_params(ModelShape(2, 3), seed=1)
    cfg = TrainerConfig(eta=0.1, tau=25, batch_size=8, seed=42)
    a = local_train(init, data, cfg)
    b = local_train(init, data, cfg)
    assert a.values.tobytes() == b.values.tobytes()


def test_loss_decreases_on_separable_data():
    data = synth_gaussian_mixture(2, 2, [100, 100], 8.0, seed=4)
    init = zeros(ModelShape(2, 2))
    out = local_train(init, data, TrainerConfig(eta=0.1, tau=100, batch_size=16, seed=0), debug=True)
    assert loss(out, data) < loss(init, data)


def test_trained_accuracy_matches_convex_solver():
    data = synth_gaussian_mixture(2, 2, [100, 100], 6.0, seed=8)
    shape = ModelShape(2, 2)
    trained = local_train(zeros(shape), data, TrainerConfig(eta=0.1, tau=500, batch_size=32, seed=0))
    # independent oracle: full-batch L-BFGS on the same convex objective
    res = minimize(lambda v: loss(ModelParams(v, shape), data), np.zeros(shape.size), method="L-BFGS-B")
    oracle = accuracy(ModelParams(res.x, shape), data)
    assert oracle >= 0.95
    assert accuracy(trained, data) >= 0.95


def test_fedprox_pulls_towards_anchor():
    data = synth_gaussian_mixture(3, 2, [40, 40, 40], 3.0, seed=2)
    anchor = init_params(ModelShape(2, 3), seed=0)
    plain = local_train(anchor, data, TrainerConfig(eta=0.05, tau=100, seed=1))
    prox = local_train(anchor, data, TrainerConfig(eta=0.0005, tau=100, seed=1, prox_mu=1e3))
    assert np.linalg.norm(prox.values - anchor.values) < np.linalg.norm(plain.values - anchor.values)


def test_fedprox_same_step_size_is_closer():
    data = synth_gaussian_mixture(3, 2, [40, 40, 40], 3.0, seed=2)
    anchor = init_params(ModelShape(2, 3), seed=0)
    # eta * mu < 2 keeps the proximal step stable
    plain = local_train(anchor, data, TrainerConfig(eta=0.001, tau=100, seed=1))
    prox = local_train(anchor, data, TrainerConfig(eta=0.001, tau=100, seed=1, prox_mu=1e3))
    assert np.linalg.norm(prox.values - anchor.values) < np.linalg.norm(plain.values - anchor.values)


def test_mlp_trains():
    data = synth_gaussian_mixture(3, 2, [60, 60, 60], 4.0, seed=3)
    init = init_params(ModelShape(2, 3, hidden=8), seed=0)
    out = local_train(init, data, TrainerConfig(eta=0.2, tau=300, batch_size=32, seed=0), debug=True)
    assert accuracy(out, data) > 0.8


def test_per_class_accuracy_nan_for_absent_class():
    data = synth_gaussian_mixture(3, 2, [10, 0, 10], 3.0, seed=0)
    acc = per_class_accuracy(zeros(ModelShape(2, 3)), data)
    assert math.isnan(acc[1])
    assert acc[0] == 1.0 and acc[2] == 0.0  # argmax of equal logits is class 0


def test_params_bytes_round_trip():
    shape = ModelShape(3, 4, hidden=2)
    p = init_params(shape, seed=5)
    blob = p.to_bytes()
    q = ModelParams.from_bytes(blob)
    assert q.shape == shape
    assert q.values.tobytes() == p.values.tobytes()
    # trailing block is little-endian float64
    assert blob[-8:] == np.float64(p.values[-1]).astype("<f8").tobytes()


def test_init_params_layout():
    shape = ModelShape(3, 2)
    p = init_params(shape, seed=0)
    assert np.all(np.abs(p.values[:6]) <= 0.05)
    np.testing.assert_array_equal(p.values[6:], 0.0)
