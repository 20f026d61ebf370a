"""
Per-kernel local ELBO and its stochastic optimization.

For kernel ``k_i`` the variational factors are ``q(u_i) = N(m_u, C_u C_u^T)`` over
the inducing values and ``q(theta_i) = N(m_theta, C_theta C_theta^T)`` over the raw
hyperparameters. The local ELBO is::

    E_q[ E_{p(f|u,theta)} log p(y | f) ] + H[q(u)] - KL[q(theta) || p(theta)]
        + E_q[ log N(u; 0, K_UU(theta)) ]

with ``p(theta) = N(0, I)``. The inner expectation over f is closed form under
the DTC conditional; the outer one is estimated from reparameterized draws of
``(u, theta)``, and the data term from a uniformly drawn mini-batch scaled by
``|D| / |batch|``.

In point-estimate mode ``C_theta = 0``; the (infinite) entropy of the point mass
is dropped and ``log p(m_theta)`` replaces ``-KL[q(theta) || p(theta)]``.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg as sla

from vbks.gp_core import (
    TRAIN_JITTER_FLOOR,
    Dataset,
    _dtc_moments,
    _tri_solve,
    chol_jitter_traced,
    choose_inducing,
)
from vbks.kernels import KernelExpr, check_theta, default_theta, split_theta
from vbks.variational import (
    LOG_2PI,
    GaussianVariational,
    gaussian_entropy,
    gaussian_kl,
    log_normal_chol,
    raw_from_scale,
    scale_from_raw,
    standard_normal_logpdf,
)

log = logging.getLogger(__name__)

PARAM_KEYS = ("m_u", "c_u", "m_theta", "c_theta")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class MiniBatch:
    indices: np.ndarray
    scale: float

    @classmethod
    def sample(cls, n, size, rng):
        """Uniform draw with replacement."""
        rng = np.random.default_rng(rng)
        return cls(rng.integers(0, n, size=size), n / size)

    @classmethod
    def full(cls, n):
        return cls(np.arange(n), 1.0)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        if idx.size == 0:
            raise ValueError("empty mini-batch")
        if self.scale <= 0:
            raise ValueError("batch scale must be positive")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class LocalConfig:
    steps: int = 2000
    batch_size: int | None = 32  # None: deterministic full batch
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_eta_lik: int = 1
    n_eta_ce: int = 4
    ema_decay: float = 0.99
    chunk: int = 100
    learn_theta: bool = True
    # integrate q(u) out of the ascent objective analytically, sampling theta only
    marginal_u: bool = True

    def __post_init__(self):
        for name in ("steps", "n_eta_lik", "n_eta_ce", "chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass(frozen=True)
class SgprState:
    """Training state of one sparse GP (one candidate kernel)."""

    expr: KernelExpr
    inducing: np.ndarray
    params: dict
    point_theta: bool = False
    adam_m: dict = field(default=None, repr=False)
    adam_v: dict = field(default=None, repr=False)
    step: int = 0
    elbo_star: float = float("nan")
    key: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        M, P = self.inducing.shape[0], self.expr.n_hyper
        shapes = {"m_u": (M,), "c_u": (M, M), "m_theta": (P,), "c_theta": (P, P)}
        params = {k: np.asarray(self.params[k], dtype=float) for k in PARAM_KEYS}
        for k, shp in shapes.items():
            if params[k].shape != shp:
                raise ValueError(f"{k} has shape {params[k].shape}, expected {shp}")
        object.__setattr__(self, "params", params)
        if self.adam_m is None:
            object.__setattr__(self, "adam_m", {k: np.zeros_like(v) for k, v in params.items()})
            object.__setattr__(self, "adam_v", {k: np.zeros_like(v) for k, v in params.items()})
        if self.key is None:
            object.__setattr__(self, "key", np.asarray(jax.random.PRNGKey(0)))

    @property
    def name(self):
        return self.expr.canonical_name

    @property
    def q_u(self) -> GaussianVariational:
        return GaussianVariational(self.params["m_u"], self.params["c_u"])

    @property
    def q_theta(self) -> GaussianVariational:
        if self.point_theta:
            return GaussianVariational.point(self.params["m_theta"])
        return GaussianVariational(self.params["m_theta"], self.params["c_theta"])

    @property
    def n_eta(self):
        return self.inducing.shape[0] + self.expr.n_hyper


def init_state(
    expr: KernelExpr,
    data: Dataset,
    inducing=16,
    point_theta=False,
    seed=0,
    theta0=None,
    u_scale=None,
    theta_scale=0.1,
) -> SgprState:
    """Fresh state with ``m_u = 0`` and ``m_theta`` from moment heuristics.

    ``C_u`` starts at the Cholesky factor of the prior ``K_UU(m_theta)`` unless
    ``u_scale`` is given, in which case ``C_u = u_scale I``. ``C_theta`` starts at
    ``theta_scale I`` (zero in point-estimate mode).
    """
    rng = np.random.default_rng(seed)
    if np.isscalar(inducing):
        U = choose_inducing(data.X, int(inducing), rng)
    else:
        U = np.asarray(inducing, dtype=float).reshape(-1, data.dim)
    M, P = U.shape[0], expr.n_hyper
    m_theta = default_theta(expr, data.X, data.y) if theta0 is None else check_theta(expr, theta0)
    params = {
        "m_u": np.zeros(M),
        "c_u": raw_from_scale(u_scale * np.eye(M)) if u_scale else None,
        "m_theta": np.array(m_theta, dtype=float),
        "c_theta": np.zeros((P, P)) if point_theta else raw_from_scale(theta_scale * np.eye(P)),
    }
    if params["c_u"] is None:
        kp, _ = split_theta(params["m_theta"])
        L = np.asarray(chol_jitter_traced(expr.cov(kp, U, U), TRAIN_JITTER_FLOOR))
        if not np.all(np.isfinite(L)):
            raise np.linalg.LinAlgError("prior K_UU is not factorizable at the initial theta")
        params["c_u"] = raw_from_scale(L)
    key = np.asarray(jax.random.PRNGKey(int(rng.integers(0, 2**31 - 1))))
    return SgprState(expr, U, params, point_theta=point_theta, key=key)


# ---------------------------------------------------------------------------
# traced pieces


def _expected_loglik(expr, theta, u, U, Xb, yb):
    kp, noise = split_theta(theta)
    mean, resid, _ = _dtc_moments(expr, kp, U, u, Xb, full_cov=False, floor=TRAIN_JITTER_FLOOR)
    r = yb - mean
    n = yb.shape[0]
    return -0.5 * n * (LOG_2PI + jnp.log(noise)) - 0.5 * (r @ r + jnp.sum(resid)) / noise


def _cross_entropy(expr, theta, u, U):
    kp, _ = split_theta(theta)
    return log_normal_chol(u, chol_jitter_traced(expr.cov(kp, U, U), TRAIN_JITTER_FLOOR))


def _theta_term(m_theta, C_theta):
    if C_theta is None:
        return standard_normal_logpdf(m_theta)
    return -gaussian_kl(m_theta, C_theta, jnp.zeros_like(m_theta), jnp.eye(m_theta.shape[0]))


def _elbo_from_moments(expr, m_u, C_u, m_theta, C_theta, eta_lik, eta_ce, U, Xb, yb, scale):
    M = U.shape[0]

    def draw(eta):
        u = C_u @ eta[:M] + m_u
        th = m_theta if C_theta is None else C_theta @ eta[M:] + m_theta
        return u, th

    def lik(eta):
        u, th = draw(eta)
        return _expected_loglik(expr, th, u, U, Xb, yb)

    def ce(eta):
        u, th = draw(eta)
        return _cross_entropy(expr, th, u, U)

    data_term = scale * jnp.mean(jax.vmap(lik)(eta_lik))
    return (
        data_term
        + gaussian_entropy(C_u)
        + _theta_term(m_theta, C_theta)
        + jnp.mean(jax.vmap(ce)(eta_ce))
    )


def _elbo_marginal_u(expr, m_u, C_u, m_theta, C_theta, eta_theta, U, Xb, yb, scale):
    # q(u) integrated out analytically for each theta draw; same objective,
    # lower-variance estimate
    M = U.shape[0]

    def one(eta):
        th = m_theta if C_theta is None else C_theta @ eta + m_theta
        kp, noise = split_theta(th)
        L = chol_jitter_traced(expr.cov(kp, U, U), TRAIN_JITTER_FLOOR)
        A = _tri_solve(L, expr.cov(kp, U, Xb))
        B = _tri_solve(L, C_u)
        a = _tri_solve(L, m_u)
        resid = expr.diag(kp, Xb) - jnp.sum(A * A, axis=0)
        spread = jnp.sum((A.T @ B) ** 2, axis=1)
        r = yb - A.T @ a
        n = yb.shape[0]
        ell = -0.5 * n * (LOG_2PI + jnp.log(noise)) - 0.5 * (r @ r + jnp.sum(resid + spread)) / noise
        ce = -0.5 * (M * LOG_2PI + a @ a + jnp.sum(B * B)) - jnp.sum(jnp.log(jnp.diag(L)))
        return scale * ell + ce

    return jnp.mean(jax.vmap(one)(eta_theta)) + gaussian_entropy(C_u) + _theta_term(m_theta, C_theta)


def make_elbo(expr: KernelExpr, point_theta: bool):
    """Return ``elbo(params, eta_lik, eta_ce, U, Xb, yb, scale)`` (traceable)."""

    def elbo(params, eta_lik, eta_ce, U, Xb, yb, scale):
        C_theta = None if point_theta else scale_from_raw(params["c_theta"])
        return _elbo_from_moments(
            expr,
            params["m_u"],
            scale_from_raw(params["c_u"]),
            params["m_theta"],
            C_theta,
            eta_lik,
            eta_ce,
            U,
            Xb,
            yb,
            scale,
        )

    return elbo


def _mean_chol(expr, m_theta, U):
    kp, _ = split_theta(m_theta)
    return chol_jitter_traced(expr.cov(kp, U, U), TRAIN_JITTER_FLOOR)


def _make_working_elbo(expr, point_theta, marginal_u=False):
    # q(u) parameters whitened at the mean hyperparameters: m_u = R m, C_u = R C
    # with R = chol K_UU(m_theta). A bijection on the variational parameters.
    def elbo(params, eta_lik, eta_ce, U, Xb, yb, scale):
        R = _mean_chol(expr, params["m_theta"], U)
        C_theta = None if point_theta else scale_from_raw(params["c_theta"])
        if marginal_u:
            return _elbo_marginal_u(
                expr,
                R @ params["m_u"],
                R @ scale_from_raw(params["c_u"]),
                params["m_theta"],
                C_theta,
                eta_lik,
                U,
                Xb,
                yb,
                scale,
            )
        return _elbo_from_moments(
            expr,
            R @ params["m_u"],
            R @ scale_from_raw(params["c_u"]),
            params["m_theta"],
            C_theta,
            eta_lik,
            eta_ce,
            U,
            Xb,
            yb,
            scale,
        )

    return elbo


@functools.lru_cache(maxsize=None)
def _compiled_elbo(expr, point_theta):
    f = make_elbo(expr, point_theta)
    return jax.jit(f), jax.jit(jax.grad(f))


# ---------------------------------------------------------------------------
# public estimators


def expected_loglik(expr: KernelExpr, theta, u, U, X, y) -> float:
    """Closed-form ``E_{p(f|u,theta)}[log N(y; f, noise I)]`` under the DTC conditional."""
    theta = check_theta(expr, theta)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    U = np.asarray(U, dtype=float).reshape(-1, X.shape[1])
    u = np.asarray(u, dtype=float)
    if u.shape != (U.shape[0],):
        raise ValueError("u must have one entry per inducing input")
    return float(_expected_loglik(expr, theta, u, U, X, np.asarray(y, dtype=float)))


def _as_eta(state, eta):
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[None, :]
    if eta.shape[1] != state.n_eta or eta.shape[0] < 1:
        raise ValueError(f"eta draws must have shape (S, {state.n_eta})")
    return eta


def _batch_arrays(batch: MiniBatch, data: Dataset):
    if batch.indices.max() >= len(data) or batch.indices.min() < 0:
        raise IndexError("batch index out of range")
    return data.X[batch.indices], data.y[batch.indices], batch.scale


def local_elbo_estimate(state: SgprState, batch: MiniBatch, data: Dataset, eta_lik, eta_ce=None) -> float:
    """Unbiased estimate of the local ELBO from one batch and the given eta draws.

    ``eta_lik`` feeds the data term and ``eta_ce`` the prior cross-entropy term;
    both have shape ``(S, |U| + n_hyper)``. ``eta_ce`` defaults to ``eta_lik``.
    """
    eta_lik = _as_eta(state, eta_lik)
    eta_ce = eta_lik if eta_ce is None else _as_eta(state, eta_ce)
    Xb, yb, scale = _batch_arrays(batch, data)
    f, _ = _compiled_elbo(state.expr, state.point_theta)
    return float(f(state.params, eta_lik, eta_ce, state.inducing, Xb, yb, scale))


def local_gradient(state: SgprState, batch: MiniBatch, data: Dataset, eta_lik, eta_ce=None) -> dict:
    """Reparameterized gradient of ``local_elbo_estimate`` w.r.t. the raw parameters.

    Keys follow ``PARAM_KEYS``; ``c_u`` and ``c_theta`` are gradients w.r.t. the raw
    scale parameterization (strict lower triangle plus pre-softplus diagonal).
    """
    eta_lik = _as_eta(state, eta_lik)
    eta_ce = eta_lik if eta_ce is None else _as_eta(state, eta_ce)
    Xb, yb, scale = _batch_arrays(batch, data)
    _, g = _compiled_elbo(state.expr, state.point_theta)
    grads = g(state.params, eta_lik, eta_ce, state.inducing, Xb, yb, scale)
    out = {k: np.tril(np.asarray(v)) if k.startswith("c_") else np.asarray(v) for k, v in grads.items()}
    if not all(np.all(np.isfinite(v)) for v in out.values()):
        raise FloatingPointError("non-finite local gradient")
    return out


# ---------------------------------------------------------------------------
# optimizer


def adam_ascent(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step that *increases* the objective. ``t`` counts from 1."""
    m = jax.tree_util.tree_map(lambda a, g: beta1 * a + (1 - beta1) * g, m, grads)
    v = jax.tree_util.tree_map(lambda a, g: beta2 * a + (1 - beta2) * g * g, v, grads)
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    params = jax.tree_util.tree_map(
        lambda p, a, b: p + lr * (a / c1) / (jnp.sqrt(b / c2) + eps), params, m, v
    )
    return params, m, v


def _tree_finite(tree):
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.all(jnp.stack([jnp.all(jnp.isfinite(x)) for x in leaves]))


def _select(pred, a, b):
    return jax.tree_util.tree_map(lambda x, y: jnp.where(pred, x, y), a, b)


@functools.lru_cache(maxsize=None)
def _compiled_run(expr, point_theta, n_steps, batch_size, n_lik, n_ce, learn_theta, marginal_u):
    elbo = _make_working_elbo(expr, point_theta, marginal_u)
    val_grad = jax.value_and_grad(elbo)

    def run(params, m, v, step, ema, bad, aborted, key, X, y, U, lr, b1, b2, eps, decay):
        n = X.shape[0]
        dim = expr.n_hyper if marginal_u else U.shape[0] + expr.n_hyper

        def draw_batch(k):
            if batch_size is None:
                return X, y, 1.0
            idx = jax.random.randint(k, (batch_size,), 0, n)
            return X[idx], y[idx], n / batch_size

        def body(carry, _):
            params, m, v, step, ema, bad, aborted, key = carry
            key, kb, kl, kc, ke, kel, kec = jax.random.split(key, 7)
            Xb, yb, scale = draw_batch(kb)
            eta_l = jax.random.normal(kl, (n_lik, dim))
            eta_c = jax.random.normal(kc, (n_ce, dim))
            val, g = val_grad(params, eta_l, eta_c, U, Xb, yb, scale)
            g = {k: jnp.tril(x) if k.startswith("c_") else x for k, x in g.items()}
            if point_theta or not learn_theta:
                g["c_theta"] = jnp.zeros_like(g["c_theta"])
            if not learn_theta:
                g["m_theta"] = jnp.zeros_like(g["m_theta"])
            finite = jnp.isfinite(val) & _tree_finite(g)
            gnorm = jnp.sqrt(sum(jnp.sum(x * x) for x in jax.tree_util.tree_leaves(g)))
            g = jax.tree_util.tree_map(lambda x: jnp.where(finite, x, 0.0), g)
            t = step + 1
            new_p, new_m, new_v = adam_ascent(params, g, m, v, t, lr, b1, b2, eps)
            take = finite & ~aborted
            params = _select(take, new_p, params)
            m = _select(take, new_m, m)
            v = _select(take, new_v, v)

            Xe, ye, scale_e = draw_batch(ke)
            eta_el = jax.random.normal(kel, (n_lik, dim))
            eta_ec = jax.random.normal(kec, (n_ce, dim))
            ev = elbo(params, eta_el, eta_ec, U, Xe, ye, scale_e)
            ev_ok = jnp.isfinite(ev) & ~aborted
            smoothed = jnp.where(jnp.isnan(ema), ev, decay * ema + (1 - decay) * ev)
            ema = jnp.where(ev_ok, smoothed, ema)

            bad = jnp.where(finite, 0, bad + 1)
            aborted = aborted | (bad >= 3)
            step = jnp.where(aborted, step, t)
            return (params, m, v, step, ema, bad, aborted, key), (t, val, ema, gnorm)

        carry = (params, m, v, step, ema, bad, aborted, key)
        return jax.lax.scan(body, carry, None, length=n_steps)

    return jax.jit(run)


def _to_working(state: SgprState):
    R = np.asarray(_mean_chol(state.expr, state.params["m_theta"], state.inducing))
    if not np.all(np.isfinite(R)):
        raise TrainingAborted(f"{state.name}: K_UU not factorizable at the mean hyperparameters", state)
    out = dict(state.params)
    out["m_u"] = sla.solve_triangular(R, out["m_u"], lower=True)
    C = np.asarray(scale_from_raw(out["c_u"]))
    out["c_u"] = raw_from_scale(sla.solve_triangular(R, C, lower=True))
    return out


def _from_working(expr, params, U):
    out = {k: np.asarray(x) for k, x in params.items()}
    R = np.asarray(_mean_chol(expr, out["m_theta"], U))
    out["m_u"] = R @ out["m_u"]
    out["c_u"] = raw_from_scale(R @ np.asarray(scale_from_raw(out["c_u"])))
    return out


def optimize_local(state: SgprState, data: Dataset, config: LocalConfig, on_chunk=None) -> SgprState:
    """Adam-driven stochastic gradient ascent on the local ELBO.

    Runs ``config.steps`` steps in compiled chunks of ``config.chunk``. The ascent
    moves q(u) in coordinates whitened by ``R = chol K_UU(m_theta)``
    (``m_u = R m``, ``C_u = R C``); the variational family and the objective are
    unchanged, only the ascent geometry is. Adam moments live in these
    coordinates.

    After each chunk ``on_chunk(state, rows)`` is called, where ``rows`` has
    columns ``(step, elbo_estimate, smoothed_elbo, grad_norm)``. The smoothed
    value is the running ``elbo_star``, refreshed every step on an independent
    batch.
    """
    if config.batch_size is not None and config.batch_size > len(data):
        raise ValueError("batch_size exceeds the data size")
    X = jnp.asarray(data.X)
    y = jnp.asarray(data.y)
    U = jnp.asarray(state.inducing)
    hyper = (
        float(config.learning_rate),
        float(config.beta1),
        float(config.beta2),
        float(config.eps),
        float(config.ema_decay),
    )
    remaining = config.steps
    while remaining > 0:
        n = min(config.chunk, remaining)
        run = _compiled_run(
            state.expr,
            state.point_theta,
            n,
            config.batch_size,
            config.n_eta_lik,
            config.n_eta_ce,
            config.learn_theta,
            config.marginal_u,
        )
        carry = (
            {k: jnp.asarray(x) for k, x in _to_working(state).items()},
            {k: jnp.asarray(x) for k, x in state.adam_m.items()},
            {k: jnp.asarray(x) for k, x in state.adam_v.items()},
            jnp.asarray(state.step),
            jnp.asarray(state.elbo_star, dtype=float),
            jnp.asarray(0),
            jnp.asarray(False),
            jnp.asarray(state.key),
        )
        carry, rows = run(*carry, X, y, U, *hyper)
        params, m, v, step, ema, _, aborted, key = carry
        remaining -= n
        state = replace(
            state,
            params=_from_working(state.expr, params, state.inducing),
            adam_m={k: np.asarray(x) for k, x in m.items()},
            adam_v={k: np.asarray(x) for k, x in v.items()},
            step=int(step),
            elbo_star=float(ema),
            key=np.asarray(key),
        )
        if bool(aborted):
            raise TrainingAborted(
                f"{state.name}: non-finite ELBO or gradient on 3 consecutive steps "
                f"(stopped at step {state.step})",
                state,
            )
        if on_chunk is not None:
            on_chunk(state, np.column_stack([np.asarray(r) for r in rows]))
    return state
