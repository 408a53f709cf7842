"""Bound arithmetic and operator-norm estimation tests."""

import json
import math

import numpy as np
import pytest

from fedlite.analysis import (
    AnalysisConstants,
    ConstantsReport,
    best_correction,
    convergence_bound,
    estimate_constants,
    hessian_spectral_norm,
    jacobian_spectral_norm,
    kappa_trajectory,
    mixed_spectral_norm,
    noise_term,
    optimization_term,
    power_iteration_norm,
    quantization_term,
    to_json,
)
from fedlite.federation import DataSample
from fedlite.nn import DenseNetwork, Layer, SplitModel, backward, forward
from fedlite.trainer import RoundTrace


def ones_constants(**overrides):
    base = dict(objective_gap=1.0, smoothness=1.0, grad_variance=1.0,
                cross_curvature=1.0, activation_curvature=1.0,
                client_jacobian_norm=1.0)
    base.update(overrides)
    return AnalysisConstants(**base)


# ---------------------------------------------------------------------------
# bound arithmetic


def test_all_ones_bound_is_twenty():
    c = ones_constants()
    assert convergence_bound(c, batch=1, clients=1, rounds=1, kappa=1.0) == 20.0


def test_zero_kappa_leaves_only_the_sgd_terms():
    c = ones_constants(objective_gap=3.0, smoothness=2.0, grad_variance=5.0)
    b, s, t = 8, 4, 16
    expected = (4.0 * 3.0 + 4.0 * 2.0 * 5.0) / math.sqrt(b * s * t)
    assert convergence_bound(c, b, s, t, kappa=0.0) == pytest.approx(expected, rel=1e-15)
    assert quantization_term(c, b, s, t, kappa=0.0) == 0.0


def test_term_scaling_with_schedule():
    c = ones_constants(objective_gap=2.0)
    assert optimization_term(c, batch=4, clients=1, rounds=1) == 4.0
    assert noise_term(c, batch=1, clients=1, rounds=4) == 2.0
    # quantization term grows with batch*clients and shrinks with rounds
    small = quantization_term(c, 1, 1, 16, kappa=1.0)
    large = quantization_term(c, 16, 1, 16, kappa=1.0)
    assert large > small


def test_matched_correction_removes_the_downlink_channel():
    c = ones_constants(cross_curvature=0.5, activation_curvature=1.7,
                       client_jacobian_norm=3.0)
    q = quantization_term(c, 2, 3, 8, kappa=0.25, correction=1.7)
    expected = (4.0 * math.sqrt(6 / 8) + 2.0) * 0.25 * 0.0625
    assert q == pytest.approx(expected, rel=1e-12)


def test_schedule_validation():
    c = ones_constants()
    with pytest.raises(ValueError):
        convergence_bound(c, batch=0, clients=1, rounds=1, kappa=0.0)
    with pytest.raises(ValueError):
        convergence_bound(c, batch=1, clients=1, rounds=0, kappa=0.0)


def test_best_correction_recovers_activation_curvature():
    c = ones_constants(cross_curvature=0.3, activation_curvature=2.41,
                       client_jacobian_norm=1.6, objective_gap=7.0)
    lam = best_correction(c, batch=8, clients=4, rounds=32, kappa=0.7)
    assert abs(lam - 2.41) < 1e-9
    base = convergence_bound(c, 8, 4, 32, 0.7, lam)
    assert base <= convergence_bound(c, 8, 4, 32, 0.7, lam + 0.1)
    assert base <= convergence_bound(c, 8, 4, 32, 0.7, lam - 0.1)


def test_best_correction_degenerates_to_zero():
    c = ones_constants()
    assert best_correction(c, 4, 2, 8, kappa=0.0) == 0.0
    flat = ones_constants(client_jacobian_norm=0.0)
    assert best_correction(flat, 4, 2, 8, kappa=1.0) == 0.0


# ---------------------------------------------------------------------------
# operator norms from callables


def test_power_iteration_matches_svd_on_explicit_matrix():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 3))
    top = np.linalg.svd(a, compute_uv=False)[0]
    est, ok = power_iteration_norm(lambda v: a @ v, lambda u: a.T @ u, 3,
                                   steps=100, seed=1)
    assert ok
    assert abs(est - top) < 1e-8 * top


def test_power_iteration_zero_operator():
    est, ok = power_iteration_norm(lambda v: np.zeros(4), lambda u: np.zeros(3),
                                   3, steps=5)
    assert est == 0.0 and ok


def test_identity_hessian_from_quadratic_gradient():
    # gradient of 0.5*||z||^2 is z itself, so the Hessian norm is one
    est, ok = hessian_spectral_norm(lambda z: z, np.full(6, 0.3), steps=30)
    assert abs(est - 1.0) < 1e-6


def test_mixed_norm_vanishes_without_coupling():
    # a scalar function of the activations alone has a zero mixed block
    grad_param = lambda z: np.zeros(4)
    grad_act = lambda w: np.full(6, 0.3)
    est, ok = mixed_spectral_norm(grad_param, grad_act,
                                  np.zeros(4), np.full(6, 0.3), steps=10)
    assert est == 0.0 and ok


def test_mixed_norm_on_bilinear_coupling():
    # f(w, z) = w . (M z): the mixed second derivative block is exactly M
    rng = np.random.default_rng(3)
    m = rng.normal(size=(4, 6))
    top = np.linalg.svd(m, compute_uv=False)[0]
    grad_param = lambda z: m @ z
    grad_act = lambda w: m.T @ w
    est, ok = mixed_spectral_norm(grad_param, grad_act,
                                  rng.normal(size=4), rng.normal(size=6),
                                  steps=100, seed=2)
    assert abs(est - top) < 1e-4 * top


def test_client_jacobian_norm_matches_analytic_svd():
    # one affine scalar-output layer: the Jacobian rows are (x_j, 1)
    w = np.array([[0.7, -1.2]])
    b = np.array([0.4])
    net = DenseNetwork([Layer(w, b, "identity")])
    x = np.array([[0.5, -1.0, 2.0],
                  [1.5, 0.25, -0.75]])
    jac = np.column_stack([x.T, np.ones(3)])
    top = np.linalg.svd(jac, compute_uv=False)[0]

    def fn(theta):
        probe = net.copy()
        probe.set_params_vector(theta)
        z, _ = forward(probe, x)
        return z.ravel()

    def vjp(u):
        z, cache = forward(net, x)
        grads, _ = backward(net, cache, u.reshape(1, 3))
        return grads.to_vector()

    est, ok = jacobian_spectral_norm(fn, vjp, net.params_vector(), steps=100,
                                     seed=4)
    assert abs(est - top) < 1e-3 * top


# ---------------------------------------------------------------------------
# whole-model estimation


def small_model(seed=0):
    client = DenseNetwork.create([3, 5], ["tanh"], seed=seed)
    server = DenseNetwork.create([5, 3], ["softmax_ce"], seed=seed + 1)
    return SplitModel(client, server)


def test_zero_noise_data_has_zero_gradient_variance():
    # identical samples and a full-size batch leave nothing to vary
    model = small_model(seed=1)
    sample = DataSample(np.array([0.4, -0.2, 1.1]), 2)
    samples = [sample] * 20
    report = estimate_constants(model, samples, batch_size=20, num_batches=4,
                                power_steps=25, seed=3)
    assert report.constants.grad_variance == 0.0
    assert report.constants.objective_gap > 0.0
    assert report.constants.activation_curvature > 0.0
    assert report.constants.client_jacobian_norm > 0.0
    assert set(report.converged) == {"activation_curvature",
                                     "cross_curvature",
                                     "client_jacobian_norm"}


def test_estimate_constants_on_mixed_data_is_finite_and_positive():
    model = small_model(seed=2)
    rng = np.random.default_rng(8)
    samples = [DataSample(rng.normal(size=3), int(rng.integers(3)))
               for _ in range(24)]
    report = estimate_constants(model, samples, batch_size=8, num_batches=4,
                                power_steps=25, seed=5)
    c = report.constants
    for value in c.to_dict().values():
        assert math.isfinite(value)
    assert c.grad_variance > 0.0
    assert c.smoothness > 0.0
    payload = to_json(report.to_dict())
    assert json.loads(payload)["constants"]["smoothness"] == c.smoothness


def test_estimate_constants_rejects_large_models():
    client = DenseNetwork.create([300, 150], ["tanh"], seed=0)
    server = DenseNetwork.create([150, 80], ["softmax_ce"], seed=1)
    model = SplitModel(client, server)
    with pytest.raises(ValueError):
        estimate_constants(model, [DataSample(np.zeros(300), 0)] * 4)


def test_kappa_trajectory_and_json_ordering():
    traces = [RoundTrace(0, 1.0, [0.5, 0.25]), RoundTrace(1, 0.9, [0.125])]
    assert np.array_equal(kappa_trajectory(traces), [0.5, 0.125])
    assert to_json({"b": 1, "a": 2}).index('"a"') < to_json({"b": 1, "a": 2}).index('"b"')
