"""Cholesky with jitter, exact GP prediction and the DTC conditionals."""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg as sla

from vbks.kernels import KernelExpr, _as_inputs, check_theta, split_theta

JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)
# relative jitter floor for K_UU inside the variational objective and prediction
TRAIN_JITTER_FLOOR = 1e-6


class IllConditionedError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` (n, d) and outputs ``y`` (n,), with optional standardization.

    When normalized, ``X = (X_orig - x_mean) / x_scale`` and likewise for ``y``.
    """

    X: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_mean: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        X = _as_inputs(self.X)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains NaN or Inf")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @classmethod
    def standardized(cls, X, y, inputs=True, outputs=True):
        X = _as_inputs(X)
        y = np.asarray(y, dtype=float).reshape(-1)
        kw = {}
        if inputs:
            mu, sd = X.mean(axis=0), X.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            X = (X - mu) / sd
            kw.update(x_mean=mu, x_scale=sd)
        if outputs:
            mu, sd = float(y.mean()), float(y.std())
            sd = sd if sd > 0 else 1.0
            y = (y - mu) / sd
            kw.update(y_mean=mu, y_scale=sd)
        return cls(X, y, **kw)

    def transform_inputs(self, X):
        X = _as_inputs(X)
        if self.x_mean is None:
            return X
        return (X - self.x_mean) / self.x_scale

    def restore_outputs(self, mean, var=None):
        mean = np.asarray(mean) * self.y_scale + self.y_mean
        if var is None:
            return mean
        return mean, np.asarray(var) * self.y_scale**2


def choose_inducing(X, size: int, rng) -> np.ndarray:
    """Uniformly random subset of distinct training rows."""
    X = _as_inputs(X)
    uniq = np.unique(X, axis=0)
    if not 1 <= size <= len(uniq):
        raise ValueError(f"need 1 <= |U| <= {len(uniq)} distinct inputs, got {size}")
    rng = np.random.default_rng(rng)
    idx = rng.choice(len(uniq), size=size, replace=False)
    return uniq[np.sort(idx)]


# ---------------------------------------------------------------------------
# Cholesky


def chol_jitter(A):
    """Lower Cholesky factor of ``A + j I`` for the smallest ladder jitter ``j``.

    The ladder is ``JITTER_LADDER * mean(diag A)``. Returns ``(L, j)``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    scale = float(np.mean(np.diag(A)))
    eye = np.eye(A.shape[0])
    for rel in JITTER_LADDER:
        j = rel * scale
        try:
            return np.linalg.cholesky(A + j * eye), j
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedError(
        f"Cholesky failed at maximum jitter {JITTER_LADDER[-1]:g} x mean diagonal"
    )


def _pick_level(A, floor=0.0):
    A = jax.lax.stop_gradient(A)
    scale = jnp.mean(jnp.diag(A))
    eye = jnp.eye(A.shape[0])
    levels = tuple(r for r in JITTER_LADDER if r >= floor) or (JITTER_LADDER[-1],)
    ok = jnp.stack(
        [jnp.all(jnp.isfinite(jnp.linalg.cholesky(A + r * scale * eye))) for r in levels]
    )
    ladder = jnp.asarray(levels + (levels[-1],))
    # first level that factorizes; the last level again when none does
    first = jnp.argmax(jnp.concatenate([ok, jnp.array([True])]))
    return ladder[first]


def chol_jitter_traced(A, floor=0.0):
    """Traceable ``chol_jitter``: the ladder level is chosen outside the gradient.

    The jitter itself, level times mean diagonal, stays differentiable so the
    gradient matches the objective between level switches. Ladder levels below
    ``floor`` are skipped. A factor full of NaN signals failure at maximum jitter.
    """
    j = _pick_level(A, floor) * jnp.mean(jnp.diag(A))
    return jnp.linalg.cholesky(A + j * jnp.eye(A.shape[0]))


def _tri_solve(L, B, trans=False):
    return jax.scipy.linalg.solve_triangular(L, B, lower=True, trans=1 if trans else 0)


def chol_solve(L, B):
    return _tri_solve(L, _tri_solve(L, B), trans=True)


# ---------------------------------------------------------------------------
# exact GP


def full_gp_predict(expr: KernelExpr, theta, data: Dataset, Xstar, observation=False):
    """Exact GP posterior mean and variance at ``Xstar`` (latent f by default)."""
    theta = check_theta(expr, theta)
    Xs = _as_inputs(Xstar, "Xstar")
    params, noise = split_theta(theta)
    K = np.asarray(expr.cov(params, data.X, data.X)) + float(noise) * np.eye(len(data))
    Ks = np.asarray(expr.cov(params, Xs, data.X))
    L, _ = chol_jitter(K)
    alpha = sla.cho_solve((L, True), data.y)
    mean = Ks @ alpha
    V = sla.solve_triangular(L, Ks.T, lower=True)
    var = np.asarray(expr.diag(params, Xs)) - np.sum(V * V, axis=0)
    if observation:
        var = var + float(noise)
    return mean, var


# ---------------------------------------------------------------------------
# DTC conditionals


def _dtc_moments(expr, params, U, u, X, full_cov, floor=0.0):
    Kuu = expr.cov(params, U, U)
    L = chol_jitter_traced(Kuu, floor)
    Kux = expr.cov(params, U, X)
    A = _tri_solve(L, Kux)  # L^-1 K_UX
    mean = A.T @ _tri_solve(L, u)
    if full_cov:
        cov = expr.cov(params, X, X) - A.T @ A
    else:
        cov = expr.diag(params, X) - jnp.sum(A * A, axis=0)
    return mean, cov, L


def _check_conditional_args(expr, theta, U, u, X):
    theta = check_theta(expr, theta)
    U = _as_inputs(U, "U")
    X = _as_inputs(X)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != U.shape[0]:
        raise ValueError(f"u has length {u.shape[0]} but |U| = {U.shape[0]}")
    if U.shape[1] != X.shape[1]:
        raise ValueError("input dimension mismatch")
    return theta, U, u, X


def dtc_train_conditional(expr: KernelExpr, theta, U, u, X):
    """Mean ``K_XU K_UU^-1 u`` and Nystrom residual covariance of f at X given u."""
    theta, U, u, X = _check_conditional_args(expr, theta, U, u, X)
    params, _ = split_theta(theta)
    mean, cov, L = _dtc_moments(expr, params, U, u, X, full_cov=True)
    if not np.all(np.isfinite(np.asarray(L))):
        raise IllConditionedError("K_UU is singular beyond the jitter ladder")
    return np.asarray(mean), np.asarray(cov)


def dtc_test_conditional(expr: KernelExpr, theta, U, u, Xstar):
    """Pointwise DTC test conditional: means and variances at each row of Xstar."""
    theta, U, u, X = _check_conditional_args(expr, theta, U, u, Xstar)
    params, _ = split_theta(theta)
    mean, var, L = _dtc_moments(expr, params, U, u, X, full_cov=False)
    if not np.all(np.isfinite(np.asarray(L))):
        raise IllConditionedError("K_UU is singular beyond the jitter ladder")
    return np.asarray(mean), np.asarray(var)
