"""Per-kernel predictive moments and their Bayesian model average."""

from __future__ import annotations

import functools

import jax
import jax.numpy as jnp
import numpy as np

from vbks.gp_core import TRAIN_JITTER_FLOOR, IllConditionedError, _dtc_moments, _tri_solve
from vbks.kernels import _as_inputs, check_theta, split_theta
from vbks.local_elbo import SgprState
from vbks.variational import scale_from_raw

DEFAULT_THETA_DRAWS = 100


def _moments(expr, theta, U, m_u, C_u, Xs):
    kp, _ = split_theta(theta)
    mean, resid, L = _dtc_moments(expr, kp, U, m_u, Xs, full_cov=False, floor=TRAIN_JITTER_FLOOR)
    A = _tri_solve(L, expr.cov(kp, U, Xs))
    W = A.T @ _tri_solve(L, C_u)
    return mean, resid + jnp.sum(W * W, axis=1)


@functools.lru_cache(maxsize=None)
def _compiled(expr):
    one = jax.jit(lambda *a: _moments(expr, *a))
    many = jax.jit(jax.vmap(lambda *a: _moments(expr, *a), in_axes=(0, None, None, None, None)))
    return one, many


def _check_inputs(state, Xstar):
    Xs = _as_inputs(Xstar, "Xstar")
    if Xs.shape[1] != state.inducing.shape[1]:
        raise ValueError("input dimension mismatch")
    return Xs


def _finite(*arrays):
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise IllConditionedError("K_UU is singular beyond the jitter ladder")


def predict_given_theta(state: SgprState, theta, Xstar):
    """Latent mean and variance at ``Xstar`` with q(u) integrated out, theta fixed."""
    theta = check_theta(state.expr, theta)
    Xs = _check_inputs(state, Xstar)
    one, _ = _compiled(state.expr)
    C_u = scale_from_raw(state.params["c_u"])
    mean, var = one(theta, state.inducing, state.params["m_u"], C_u, Xs)
    mean, var = np.asarray(mean), np.asarray(var)
    _finite(mean, var)
    return mean, var


def noise_mean(state: SgprState) -> float:
    """Posterior mean of the noise variance (lognormal under q(theta))."""
    m = state.params["m_theta"][-1]
    if state.point_theta:
        return float(np.exp(m))
    C = np.asarray(scale_from_raw(state.params["c_theta"]))
    return float(np.exp(m + 0.5 * np.sum(C[-1] ** 2)))


def predict_kernel(state: SgprState, Xstar, S_theta=DEFAULT_THETA_DRAWS, seed=0, observation=False):
    """Moments for one kernel, averaging over ``S_theta`` draws from q(theta).

    Point-estimate states use ``m_theta`` alone. ``observation`` adds the
    posterior mean noise variance.
    """
    if S_theta < 1:
        raise ValueError("S_theta must be >= 1")
    if state.point_theta:
        mean, var = predict_given_theta(state, state.params["m_theta"], Xstar)
    else:
        Xs = _check_inputs(state, Xstar)
        C_t = np.asarray(scale_from_raw(state.params["c_theta"]))
        eta = np.random.default_rng(seed).standard_normal((S_theta, state.expr.n_hyper))
        thetas = eta @ C_t.T + state.params["m_theta"]
        _, many = _compiled(state.expr)
        C_u = scale_from_raw(state.params["c_u"])
        mus, vs = many(thetas, state.inducing, state.params["m_u"], C_u, Xs)
        mus, vs = np.asarray(mus), np.asarray(vs)
        _finite(mus, vs)
        mean = mus.mean(axis=0)
        var = (vs + mus**2).mean(axis=0) - mean**2
    if observation:
        var = var + noise_mean(state)
    return mean, var


def check_simplex(q, tol=1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    if np.any(~np.isfinite(q)) or np.any(q < -tol) or abs(q.sum() - 1.0) > tol:
        raise ValueError(f"kernel posterior is not on the simplex (sum {q.sum():.9g})")
    return q


def mixture_moments(weights, means, variances):
    """Mean and variance of a mixture; rows of ``means``/``variances`` are components."""
    w = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    mean = 0.0
    for wi, mi in zip(w, means):
        mean = mean + wi * mi
    var = 0.0
    # sum_i w_i (var_i + mu_i^2) - mu^2, written in spread form
    for wi, mi, vi in zip(w, means, variances):
        var = var + wi * (vi + (mi - mean) ** 2)
    return mean, var


def predict_bma(states, q, Xstar, S_theta=DEFAULT_THETA_DRAWS, seed=0, observation=False, return_components=False):
    """Posterior-weighted mixture of the per-kernel predictions.

    Kernels with zero weight are skipped. Every kernel uses the same ``seed``, so
    a one-hot ``q`` reproduces ``predict_kernel`` exactly.
    """
    q = check_simplex(q)
    if len(states) != q.size:
        raise ValueError("need one posterior weight per state")
    Xs = _as_inputs(Xstar, "Xstar")
    keep = [i for i in range(q.size) if q[i] > 0]
    comps = [predict_kernel(states[i], Xs, S_theta, seed, observation) for i in keep]
    means = np.array([c[0] for c in comps])
    variances = np.array([c[1] for c in comps])
    mean, var = mixture_moments(q[keep], means, variances)
    if return_components:
        full_m = np.full((q.size, len(Xs)), np.nan)
        full_v = np.full((q.size, len(Xs)), np.nan)
        full_m[keep], full_v[keep] = means, variances
        return mean, var, full_m, full_v
    return mean, var


def rmse(predictions, truth) -> float:
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(truth, dtype=float).reshape(-1)
    if p.size != t.size:
        raise ValueError("predictions and truth differ in length")
    if p.size == 0:
        raise ValueError("empty test set")
    return float(np.sqrt(np.mean((t - p) ** 2)))
