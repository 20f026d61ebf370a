"""
Gaussian variational factors written as affine maps of standard normal draws,
``x = C @ eta + m``. ``C`` is lower triangular with a softplus-mapped diagonal,
so ``C C^T`` is a valid covariance for any raw parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from vbks.gp_core import IllConditionedError, _tri_solve, chol_jitter_traced
from vbks.kernels import KernelExpr, split_theta

LOG_2PI = float(np.log(2 * np.pi))


class PointEstimateError(RuntimeError):
    """Raised when a density quantity is requested from a point-estimate factor."""


def softplus_inv(x):
    x = np.asarray(x, dtype=float)
    return x + np.log(-np.expm1(-x))


def scale_from_raw(raw):
    """Lower-triangular scale matrix from its unconstrained parameterization."""
    d = jax.nn.softplus(jnp.diag(raw))
    return jnp.tril(raw, -1) + jnp.diag(d)


def raw_from_scale(C):
    C = np.tril(np.asarray(C, dtype=float))
    raw = C.copy()
    np.fill_diagonal(raw, softplus_inv(np.diag(C)))
    return raw


def gaussian_entropy(C):
    n = C.shape[0]
    return 0.5 * n * (LOG_2PI + 1.0) + jnp.sum(jnp.log(jnp.abs(jnp.diag(C))))


def gaussian_kl(m, C, p_mean, p_chol):
    """KL(N(m, C C^T) || N(p_mean, p_chol p_chol^T)) via triangular solves."""
    n = m.shape[0]
    A = _tri_solve(p_chol, C)
    b = _tri_solve(p_chol, p_mean - m)
    logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diag(p_chol)))
    logdet_q = 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diag(C))))
    return 0.5 * (jnp.sum(A * A) + jnp.sum(b * b) - n + logdet_p - logdet_q)


def log_normal_chol(x, L):
    """log N(x; 0, L L^T)."""
    a = _tri_solve(L, x)
    return -0.5 * (x.shape[0] * LOG_2PI + jnp.sum(a * a)) - jnp.sum(jnp.log(jnp.diag(L)))


def standard_normal_logpdf(x):
    return -0.5 * (x.shape[0] * LOG_2PI + jnp.sum(x * x))


@dataclass(frozen=True)
class GaussianVariational:
    """Variational Gaussian ``N(mean, C C^T)``; ``scale_raw=None`` means C = 0."""

    mean: np.ndarray
    scale_raw: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        object.__setattr__(self, "mean", m)
        if self.scale_raw is not None:
            raw = np.asarray(self.scale_raw, dtype=float)
            if raw.shape != (m.size, m.size):
                raise ValueError(f"scale must be {m.size}x{m.size}, got {raw.shape}")
            object.__setattr__(self, "scale_raw", np.tril(raw))

    @classmethod
    def from_scale(cls, mean, C):
        C = np.asarray(C, dtype=float)
        if np.any(np.triu(C, 1) != 0):
            raise ValueError("scale matrix must be lower triangular")
        if np.any(np.diag(C) <= 0):
            raise ValueError("scale diagonal must be positive")
        return cls(mean, raw_from_scale(C))

    @classmethod
    def point(cls, mean):
        return cls(mean, None)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_point(self) -> bool:
        return self.scale_raw is None

    @property
    def scale(self) -> np.ndarray:
        if self.is_point:
            return np.zeros((self.dim, self.dim))
        return np.asarray(scale_from_raw(self.scale_raw))

    @property
    def cov(self) -> np.ndarray:
        C = self.scale
        return C @ C.T

    def _require_density(self):
        if self.is_point:
            raise PointEstimateError("point-estimate factor has no density")


def sample(q: GaussianVariational, eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.shape[-1] != q.dim:
        raise ValueError(f"eta has dimension {eta.shape[-1]}, expected {q.dim}")
    if q.is_point:
        return np.broadcast_to(q.mean, eta.shape).copy()
    return eta @ q.scale.T + q.mean


def entropy(q: GaussianVariational) -> float:
    q._require_density()
    C = q.scale
    if np.any(np.diag(C) == 0):
        raise ValueError("singular scale matrix")
    return float(gaussian_entropy(C))


def kl_gaussian(q: GaussianVariational, p_mean, p_chol) -> float:
    q._require_density()
    p_mean = np.asarray(p_mean, dtype=float).reshape(-1)
    p_chol = np.asarray(p_chol, dtype=float)
    if p_mean.size != q.dim or p_chol.shape != (q.dim, q.dim):
        raise ValueError("prior dimensions do not match q")
    return float(gaussian_kl(q.mean, q.scale, p_mean, p_chol))


def _draw(q: GaussianVariational, eta):
    if q.is_point:
        return jnp.asarray(q.mean)
    return scale_from_raw(q.scale_raw) @ eta + q.mean


def cross_entropy_prior_u(
    q_u: GaussianVariational,
    q_theta: GaussianVariational,
    expr: KernelExpr,
    U,
    n_samples: int,
    seed=0,
) -> float:
    """MC estimate of ``E_{q(u) q(theta)}[log N(u; 0, K_UU(theta))]``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    U = np.asarray(U, dtype=float).reshape(q_u.dim, -1)
    if q_theta.dim != expr.n_hyper:
        raise ValueError("q_theta dimension does not match the kernel")
    key_u, key_t = jax.random.split(jax.random.PRNGKey(seed))
    eta_u = jax.random.normal(key_u, (n_samples, q_u.dim))
    eta_t = jax.random.normal(key_t, (n_samples, q_theta.dim))

    def one(eu, et):
        u = _draw(q_u, eu)
        params, _ = split_theta(_draw(q_theta, et))
        L = chol_jitter_traced(expr.cov(params, U, U))
        return log_normal_chol(u, L)

    vals = np.asarray(jax.vmap(one)(eta_u, eta_t))
    if not np.all(np.isfinite(vals)):
        raise IllConditionedError("K_UU factorization failed for a sampled theta")
    return float(vals.mean())
