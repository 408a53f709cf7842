"""Convergence-rate bookkeeping for quantized split training.

The quantizer's per-example error enters the client update through two
channels: it shifts the point where the server evaluates its own gradient,
and it shifts the downlink gradient the client backpropagates.  The bound
computed here tracks both with three curvature-style constants measured at
the cut:

* ``cross_curvature``: how strongly an activation perturbation moves the
  server's parameter gradient (mixed second derivative norm);
* ``activation_curvature``: how strongly it moves the downlink gradient
  (second derivative of the server loss in the activations);
* ``client_jacobian_norm``: how strongly a downlink perturbation propagates
  into the client's parameter gradient (cut-output Jacobian norm).

The correction coefficient enters only through (activation_curvature -
correction)^2, so the bound is an exact quadratic in the correction and its
minimizer can be read off a three-point parabola fit.

All constant estimators work on explicit callables with finite-difference
operator products and power iteration, so they stay honest (no hand-derived
Hessians) but are strictly toy-scale tools.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from .nn import SplitModel, backward, forward, loss_and_grad, softmax_columns
from .federation import as_arrays

MAX_ANALYZABLE_PARAMS = 50_000


@dataclass(frozen=True)
class AnalysisConstants:
    """Problem constants feeding :func:`convergence_bound`.

    ``objective_gap`` is the starting objective minus its floor;
    ``grad_variance`` is the per-example gradient variance (the minibatch
    variance times the batch size).
    """

    objective_gap: float
    smoothness: float
    grad_variance: float
    cross_curvature: float
    activation_curvature: float
    client_jacobian_norm: float

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


def _check_schedule(batch: int, clients: int, rounds: int) -> None:
    if batch < 1 or clients < 1 or rounds < 1:
        raise ValueError("batch, clients and rounds must all be >= 1")


def optimization_term(constants: AnalysisConstants, batch: int, clients: int,
                      rounds: int) -> float:
    _check_schedule(batch, clients, rounds)
    return 4.0 * constants.objective_gap / math.sqrt(batch * clients * rounds)


def noise_term(constants: AnalysisConstants, batch: int, clients: int,
               rounds: int) -> float:
    _check_schedule(batch, clients, rounds)
    return (4.0 * constants.smoothness * constants.grad_variance
            / math.sqrt(batch * clients * rounds))


def quantization_term(constants: AnalysisConstants, batch: int, clients: int,
                      rounds: int, kappa: float,
                      correction: float = 0.0) -> float:
    """Compression penalty; an exact quadratic in ``correction``."""
    _check_schedule(batch, clients, rounds)
    mismatch = constants.activation_curvature - correction
    sensitivity = (constants.cross_curvature ** 2
                   + mismatch ** 2 * constants.client_jacobian_norm ** 2)
    return (4.0 * math.sqrt(batch * clients / rounds) + 2.0) * sensitivity * kappa ** 2


def convergence_bound(constants: AnalysisConstants, batch: int, clients: int,
                      rounds: int, kappa: float,
                      correction: float = 0.0) -> float:
    """Bound on the mean squared gradient norm after ``rounds`` rounds."""
    return (optimization_term(constants, batch, clients, rounds)
            + noise_term(constants, batch, clients, rounds)
            + quantization_term(constants, batch, clients, rounds, kappa,
                                correction))


def best_correction(constants: AnalysisConstants, batch: int, clients: int,
                    rounds: int, kappa: float) -> float:
    """Correction coefficient minimizing the bound, by parabola vertex.

    Three evaluations pin the quadratic exactly.  When the bound does not
    depend on the correction (zero kappa or a degenerate client Jacobian)
    zero is returned, since every value is equally good.
    """
    f = [convergence_bound(constants, batch, clients, rounds, kappa, lam)
         for lam in (0.0, 1.0, 2.0)]
    curvature = f[2] - 2.0 * f[1] + f[0]
    scale = max(abs(v) for v in f) + 1.0
    if abs(curvature) <= 1e-12 * scale:
        return 0.0
    return 1.0 - (f[2] - f[0]) / (2.0 * curvature)


# ---------------------------------------------------------------------------
# operator-norm estimation from callables


def power_iteration_norm(apply_op: Callable[[np.ndarray], np.ndarray],
                         apply_adjoint: Callable[[np.ndarray], np.ndarray],
                         dim: int, steps: int = 20, seed: int = 0,
                         tol: float = 1e-7) -> Tuple[float, bool]:
    """Largest singular value of a linear operator given both directions.

    Runs power iteration on adjoint(op(v)); the returned flag reports
    whether consecutive estimates settled to ``tol`` relative change.
    For a symmetric operator pass the same callable twice.
    """
    if dim < 1:
        raise ValueError("operator dimension must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    estimate = 0.0
    converged = False
    for _ in range(steps):
        image = np.asarray(apply_op(v), dtype=np.float64)
        new_estimate = float(np.linalg.norm(image))
        if new_estimate == 0.0:
            return 0.0, True
        pulled = np.asarray(apply_adjoint(image), dtype=np.float64)
        pulled_norm = np.linalg.norm(pulled)
        if pulled_norm == 0.0:
            return new_estimate, True
        v = pulled / pulled_norm
        converged = abs(new_estimate - estimate) <= tol * max(1.0, new_estimate)
        estimate = new_estimate
    return estimate, converged


def _fd_apply(fn: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
              direction: np.ndarray, step: float) -> np.ndarray:
    """Central-difference product of fn's Jacobian at x0 with direction."""
    scale = np.linalg.norm(direction)
    if scale == 0.0:
        return np.zeros_like(np.asarray(fn(x0), dtype=np.float64))
    unit = direction / scale
    up = np.asarray(fn(x0 + step * unit), dtype=np.float64)
    down = np.asarray(fn(x0 - step * unit), dtype=np.float64)
    return (up - down) * (scale / (2.0 * step))


def hessian_spectral_norm(grad_fn: Callable[[np.ndarray], np.ndarray],
                          x0: np.ndarray, fd_step: float = 1e-5,
                          steps: int = 20, seed: int = 0) -> Tuple[float, bool]:
    """Spectral norm of the (symmetric) Jacobian of ``grad_fn`` at ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    matvec = lambda v: _fd_apply(grad_fn, x0, v, fd_step)
    return power_iteration_norm(matvec, matvec, x0.size, steps=steps, seed=seed)


def mixed_spectral_norm(grad_left_fn: Callable[[np.ndarray], np.ndarray],
                        grad_right_fn: Callable[[np.ndarray], np.ndarray],
                        left0: np.ndarray, right0: np.ndarray,
                        fd_step: float = 1e-5, steps: int = 20,
                        seed: int = 0) -> Tuple[float, bool]:
    """Norm of the mixed second-derivative block of a two-argument scalar.

    ``grad_left_fn(right)`` is the gradient in the left argument as the right
    one varies, and vice versa; equality of mixed partials makes the two
    finite-difference products adjoint to each other.
    """
    left0 = np.asarray(left0, dtype=np.float64)
    right0 = np.asarray(right0, dtype=np.float64)
    matvec = lambda v: _fd_apply(grad_left_fn, right0, v, fd_step)
    rmatvec = lambda u: _fd_apply(grad_right_fn, left0, u, fd_step)
    return power_iteration_norm(matvec, rmatvec, right0.size,
                                steps=steps, seed=seed)


def jacobian_spectral_norm(fn: Callable[[np.ndarray], np.ndarray],
                           vjp_fn: Callable[[np.ndarray], np.ndarray],
                           x0: np.ndarray, fd_step: float = 1e-5,
                           steps: int = 20, seed: int = 0) -> Tuple[float, bool]:
    """Largest singular value of d fn / d x, FD forward and exact pullback."""
    x0 = np.asarray(x0, dtype=np.float64)
    matvec = lambda v: _fd_apply(fn, x0, v, fd_step)
    return power_iteration_norm(matvec, vjp_fn, x0.size, steps=steps, seed=seed)


# ---------------------------------------------------------------------------
# measuring the constants on an actual split model


def _full_gradient(model: SplitModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    z, cache = forward(model.client_net, x)
    _, ws_grad, cut_grad = loss_and_grad(model.server_net, z, y)
    wc_grad, _ = backward(model.client_net, cache, cut_grad)
    return np.concatenate([wc_grad.to_vector(), ws_grad.to_vector()])


@dataclass
class ConstantsReport:
    constants: AnalysisConstants
    converged: Dict[str, bool]
    notes: List[str]

    def to_dict(self) -> dict:
        return {
            "constants": self.constants.to_dict(),
            "converged": dict(self.converged),
            "notes": list(self.notes),
        }


def estimate_constants(model: SplitModel, samples, batch_size: int = 32,
                       num_batches: int = 8, power_steps: int = 20,
                       fd_step: float = 1e-5, seed: int = 0,
                       objective_floor: float = 0.0) -> ConstantsReport:
    """Measure every bound constant at the model's current parameters.

    Smoothness comes from sampled gradient-difference ratios (a lower bound
    on the true Lipschitz constant, noted as such), the variance from
    resampled minibatches against the full-data gradient, and the three
    curvature norms from power iteration around a fixed probe batch.
    Quadratic cost in the parameter count keeps this to toy models.
    """
    if model.parameter_count > MAX_ANALYZABLE_PARAMS:
        raise ValueError(
            f"constant estimation handles at most {MAX_ANALYZABLE_PARAMS} "
            f"parameters, got {model.parameter_count}")
    samples = list(samples)
    if not samples:
        raise ValueError("need samples to estimate constants on")
    batch_size = min(batch_size, len(samples))
    rng = np.random.default_rng([seed, 11])
    notes: List[str] = []
    converged: Dict[str, bool] = {}

    x_all, y_all = as_arrays(samples)
    z_all, _ = forward(model.client_net, x_all)
    logits, _ = forward(model.server_net, z_all)
    probs = softmax_columns(logits)
    objective = float(-np.log(probs[y_all, np.arange(y_all.size)]).mean())
    gap = objective - objective_floor
    if gap < 0:
        notes.append("objective floor exceeds the measured objective")

    full_grad = _full_gradient(model, x_all, y_all)

    # per-example variance: batch-mean gradient variance scaled back up
    deviations = []
    for _ in range(num_batches):
        idx = rng.choice(len(samples), size=batch_size, replace=False)
        xb, yb = as_arrays([samples[i] for i in idx])
        gb = _full_gradient(model, xb, yb)
        deviations.append(float(((gb - full_grad) ** 2).sum()))
    grad_variance = batch_size * float(np.mean(deviations))

    # smoothness: largest observed gradient-difference ratio near the point
    theta_c = model.client_net.params_vector()
    theta_s = model.server_net.params_vector()
    ratios = [0.0]
    for scale in (1e-1, 1e-2):
        for _ in range(3):
            probe = model.copy()
            dc = rng.normal(size=theta_c.size)
            ds = rng.normal(size=theta_s.size)
            norm = math.sqrt((dc ** 2).sum() + (ds ** 2).sum())
            probe.client_net.set_params_vector(theta_c + scale * dc / norm)
            probe.server_net.set_params_vector(theta_s + scale * ds / norm)
            moved = _full_gradient(probe, x_all, y_all)
            ratios.append(float(np.linalg.norm(moved - full_grad)) / scale)
    smoothness = max(ratios)
    notes.append("smoothness is a sampled lower bound on the true constant")

    # curvature norms at a fixed probe batch
    idx = rng.choice(len(samples), size=batch_size, replace=False)
    xp, yp = as_arrays([samples[i] for i in idx])
    z0, _ = forward(model.client_net, xp)
    shape = z0.shape

    def downlink_grad(z_flat):
        _, _, g = loss_and_grad(model.server_net,
                                z_flat.reshape(shape), yp)
        return g.ravel()

    activation_curvature, ok = hessian_spectral_norm(
        downlink_grad, z0.ravel(), fd_step=fd_step, steps=power_steps,
        seed=seed)
    converged["activation_curvature"] = ok

    ws0 = model.server_net.params_vector()

    def server_param_grad(z_flat):
        _, ws_grad, _ = loss_and_grad(model.server_net,
                                      z_flat.reshape(shape), yp)
        return ws_grad.to_vector()

    def activation_grad(ws_vec):
        probe = model.server_net.copy()
        probe.set_params_vector(ws_vec)
        _, _, g = loss_and_grad(probe, z0, yp)
        return g.ravel()

    cross_curvature, ok = mixed_spectral_norm(
        server_param_grad, activation_grad, ws0, z0.ravel(),
        fd_step=fd_step, steps=power_steps, seed=seed)
    converged["cross_curvature"] = ok

    wc0 = model.client_net.params_vector()

    def client_forward(wc_vec):
        probe = model.client_net.copy()
        probe.set_params_vector(wc_vec)
        z, _ = forward(probe, xp)
        return z.ravel()

    def client_pullback(u_flat):
        z, cache = forward(model.client_net, xp)
        grads, _ = backward(model.client_net, cache, u_flat.reshape(shape))
        return grads.to_vector()

    client_jacobian_norm, ok = jacobian_spectral_norm(
        client_forward, client_pullback, wc0, fd_step=fd_step,
        steps=power_steps, seed=seed)
    converged["client_jacobian_norm"] = ok

    constants = AnalysisConstants(
        objective_gap=gap,
        smoothness=smoothness,
        grad_variance=grad_variance,
        cross_curvature=float(cross_curvature),
        activation_curvature=float(activation_curvature),
        client_jacobian_norm=float(client_jacobian_norm),
    )
    return ConstantsReport(constants, converged, notes)


# ---------------------------------------------------------------------------
# run diagnostics


def kappa_trajectory(traces) -> np.ndarray:
    """Per-round worst-client quantization error, as one array."""
    return np.array([t.kappa_max for t in traces], dtype=np.float64)


def to_json(payload: dict) -> str:
    """Stable-order JSON for diagnostics files."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
