"""
Posterior belief over a finite kernel set.

The kernel probabilities are a softmax of a Gaussian vector ``g``:
``p(k_i | g) = softmax(g)_i`` with ``q(g) = N(m_g, C_g C_g^T)`` and prior
``p(g) = N(mu_0, L_0 L_0^T)``. With the per-kernel local optima ``L*`` frozen,
the objective over ``q(g)`` is::

    E_{q(g)}[ sum_i softmax(g)_i L*_i ] - KL[q(g) || p(g)]

and the kernel posterior is the Monte Carlo average of ``softmax(g)`` over
draws from the optimized ``q(g)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import jax
import jax.numpy as jnp
import numpy as np

from vbks.local_elbo import TrainingAborted, _select, _tree_finite, adam_ascent
from vbks.variational import gaussian_kl, raw_from_scale, scale_from_raw

DEFAULT_SAMPLES = 2000


def softmax_kernel_prob(g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("g must be finite")
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class BeliefConfig:
    steps: int = 2000
    learning_rate: float = 0.05
    n_eta: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0 or self.n_eta < 1 or self.learning_rate < 0:
            raise ValueError("invalid belief optimizer settings")


@dataclass(frozen=True)
class KernelBeliefState:
    names: tuple
    l_star: np.ndarray
    m_g: np.ndarray
    c_g: np.ndarray  # raw lower-triangular scale
    prior_mean: np.ndarray
    prior_chol: np.ndarray
    posterior: np.ndarray | None = None
    n_samples: int = DEFAULT_SAMPLES
    adam_m: dict | None = None
    adam_v: dict | None = None
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        K = len(self.names)
        l_star = np.asarray(self.l_star, dtype=float).reshape(-1)
        if K < 1 or l_star.shape != (K,):
            raise ValueError("need one L* per kernel name")
        if not np.all(np.isfinite(l_star)):
            raise ValueError("L* must be finite")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "l_star", l_star)
        for f in ("m_g", "prior_mean"):
            v = np.asarray(getattr(self, f), dtype=float).reshape(-1)
            if v.shape != (K,):
                raise ValueError(f"{f} must have length {K}")
            object.__setattr__(self, f, v)
        for f in ("c_g", "prior_chol"):
            v = np.asarray(getattr(self, f), dtype=float)
            if v.shape != (K, K):
                raise ValueError(f"{f} must be {K}x{K}")
            object.__setattr__(self, f, v)
        if self.adam_m is None:
            zeros = {"m_g": np.zeros(K), "c_g": np.zeros((K, K))}
            object.__setattr__(self, "adam_m", zeros)
            object.__setattr__(self, "adam_v", {k: v.copy() for k, v in zeros.items()})

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def scale(self) -> np.ndarray:
        return np.asarray(scale_from_raw(self.c_g))

    def params(self):
        return {"m_g": self.m_g, "c_g": self.c_g}


def init_belief(names, l_star, prior_mean=None, prior_cov=None, n_samples=DEFAULT_SAMPLES, seed=0):
    """Fresh belief with ``q(g)`` set equal to the prior (``N(0, I)`` by default)."""
    K = len(names)
    mu = np.zeros(K) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    L = np.eye(K) if prior_cov is None else np.linalg.cholesky(np.asarray(prior_cov, dtype=float))
    return KernelBeliefState(
        names=tuple(names),
        l_star=l_star,
        m_g=mu.copy(),
        c_g=raw_from_scale(L),
        prior_mean=mu,
        prior_chol=L,
        n_samples=n_samples,
        seed=seed,
    )


def _objective(params, eta, l_star, prior_mean, prior_chol):
    C = scale_from_raw(params["c_g"])
    g = eta @ C.T + params["m_g"]
    fit = jnp.mean(jax.nn.softmax(g, axis=-1) @ l_star)
    return fit - gaussian_kl(params["m_g"], C, prior_mean, prior_chol)


_value = jax.jit(_objective)
_value_grad = jax.jit(jax.value_and_grad(_objective))


def _check_eta(belief, eta):
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[None]
    if eta.ndim != 2 or eta.shape[1] != belief.size:
        raise ValueError(f"eta draws must have shape (n, {belief.size})")
    return eta


def _args(belief):
    return (jnp.asarray(belief.l_star), jnp.asarray(belief.prior_mean), jnp.asarray(belief.prior_chol))


def global_elbo_estimate(belief: KernelBeliefState, eta_draws) -> float:
    eta = _check_eta(belief, eta_draws)
    return float(_value(belief.params(), jnp.asarray(eta), *_args(belief)))


def global_gradient(belief: KernelBeliefState, eta_draws) -> dict:
    """Reparameterized gradient with respect to ``m_g`` and the raw scale ``c_g``."""
    eta = _check_eta(belief, eta_draws)
    _, g = _value_grad(belief.params(), jnp.asarray(eta), *_args(belief))
    g = {k: np.asarray(v) for k, v in g.items()}
    g["c_g"] = np.tril(g["c_g"])
    if not all(np.all(np.isfinite(v)) for v in g.values()):
        raise FloatingPointError("non-finite belief gradient")
    return g


@functools.lru_cache(maxsize=None)
def _compiled_run(n_steps, n_eta):
    def run(params, m, v, step, key, l_star, mu, L, lr, b1, b2, eps):
        K = l_star.shape[0]

        def body(carry, _):
            params, m, v, step, bad, aborted, key = carry
            key, k = jax.random.split(key)
            eta = jax.random.normal(k, (n_eta, K))
            val, g = jax.value_and_grad(_objective)(params, eta, l_star, mu, L)
            g = {"m_g": g["m_g"], "c_g": jnp.tril(g["c_g"])}
            finite = jnp.isfinite(val) & _tree_finite(g)
            t = step + 1
            new_p, new_m, new_v = adam_ascent(params, g, m, v, t, lr, b1, b2, eps)
            take = finite & ~aborted
            params = _select(take, new_p, params)
            m = _select(take, new_m, m)
            v = _select(take, new_v, v)
            bad = jnp.where(finite, 0, bad + 1)
            aborted = aborted | (bad >= 3)
            step = jnp.where(aborted, step, t)
            return (params, m, v, step, bad, aborted, key), val

        carry = (params, m, v, step, jnp.asarray(0), jnp.asarray(False), key)
        return jax.lax.scan(body, carry, None, length=n_steps)

    return jax.jit(run)


def optimize_belief(belief: KernelBeliefState, config: BeliefConfig = BeliefConfig()) -> KernelBeliefState:
    """Adam ascent on ``(m_g, C_g)``, then refresh the MC posterior."""
    if config.steps > 0 and config.learning_rate > 0:
        run = _compiled_run(config.steps, config.n_eta)
        key = jax.random.fold_in(jax.random.PRNGKey(belief.seed), belief.step)
        carry, _ = run(
            {k: jnp.asarray(x) for k, x in belief.params().items()},
            {k: jnp.asarray(x) for k, x in belief.adam_m.items()},
            {k: jnp.asarray(x) for k, x in belief.adam_v.items()},
            jnp.asarray(belief.step),
            key,
            *_args(belief),
            float(config.learning_rate),
            float(config.beta1),
            float(config.beta2),
            float(config.eps),
        )
        params, m, v, step, _, aborted, _ = carry
        belief = replace(
            belief,
            m_g=np.asarray(params["m_g"]),
            c_g=np.asarray(params["c_g"]),
            adam_m={k: np.asarray(x) for k, x in m.items()},
            adam_v={k: np.asarray(x) for k, x in v.items()},
            step=int(step),
        )
        if bool(aborted):
            raise TrainingAborted("kernel belief: 3 consecutive non-finite steps", belief)
    return replace(belief, posterior=posterior_mc(belief, belief.n_samples, belief.seed))


def posterior_mc(belief: KernelBeliefState, S: int = DEFAULT_SAMPLES, seed=0) -> np.ndarray:
    """``q*(k) ~= mean_s softmax(g_s)`` with ``g_s ~ q(g)``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    eta = np.random.default_rng(seed).standard_normal((S, belief.size))
    g = eta @ belief.scale.T + belief.m_g
    return softmax_kernel_prob(g).mean(axis=0)


def ranking(belief: KernelBeliefState) -> list[int]:
    """Indices by decreasing posterior; ties go to the earlier kernel name."""
    if belief.posterior is None:
        raise ValueError("belief has no posterior yet; run optimize_belief")
    return sorted(range(belief.size), key=lambda i: (-belief.posterior[i], belief.names[i]))


def prune_and_rebuild(belief: KernelBeliefState, m: int, config: BeliefConfig = BeliefConfig()) -> KernelBeliefState:
    """Belief over the ``m`` most probable kernels, reusing their ``L*``.

    The prior is the marginal of ``p(g)`` on the kept coordinates; ``q(g)`` is
    re-initialized at that prior and optimized again.
    """
    if not 1 <= m <= belief.size:
        raise ValueError(f"m must be in [1, {belief.size}]")
    keep = ranking(belief)[:m]
    cov = belief.prior_chol @ belief.prior_chol.T
    fresh = init_belief(
        [belief.names[i] for i in keep],
        belief.l_star[keep],
        prior_mean=belief.prior_mean[keep],
        prior_cov=cov[np.ix_(keep, keep)],
        n_samples=belief.n_samples,
        seed=belief.seed,
    )
    return optimize_belief(fresh, config)
