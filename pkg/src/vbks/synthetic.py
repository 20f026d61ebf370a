"""Synthetic regression data drawn from a full-rank GP prior."""

from __future__ import annotations

import numpy as np

from vbks.gp_core import Dataset, IllConditionedError, chol_jitter, full_gp_predict
from vbks.kernels import KernelExpr, check_theta, parse_kernel, split_theta

BENCHMARK_KERNELS = (
    "LIN+RQ",
    "LIN*RQ+LIN",
    "LIN*RQ+PER",
    "PER+RQ+SE",
    "PER+LIN+RQ",
    "PER+PER+SE",
    "PER*SE+SE",
    "PER*RQ+SE",
    "PER*LIN+SE",
    "PER*LIN*SE",
    "PER*LIN*RQ",
    "(PER+RQ)*LIN",
)

DEFAULT_NOISE = 1e-4


def _raw(values, noise=DEFAULT_NOISE):
    return np.log(np.array(list(values) + [noise], dtype=float))


# generating hyperparameters as (variance, lengthscale, period) etc. per leaf
TRUE_KERNELS = {
    "(PER+RQ)*LIN": _raw([0.01, 2.0, 2 * np.pi, 0.01, 3.0, 1.0, 5.0]),
    "PER*LIN*RQ": _raw([0.01, 1.0, 2 * np.pi, 3.0, 0.01, 8.0, 1.0]),
}


def benchmark_kernels() -> list[KernelExpr]:
    return [parse_kernel(s) for s in BENCHMARK_KERNELS]


def true_kernel(name: str, noise: float = DEFAULT_NOISE):
    """Return ``(expr, theta)`` for one of the two generating kernels."""
    if name not in TRUE_KERNELS:
        raise KeyError(f"unknown true kernel {name!r}; choose from {sorted(TRUE_KERNELS)}")
    theta = TRUE_KERNELS[name].copy()
    theta[-1] = np.log(noise)
    return parse_kernel(name), theta


def _uniform(rng, n, domain):
    lo, hi = np.asarray(domain, dtype=float).reshape(2, -1)
    if np.any(hi <= lo):
        raise ValueError("each domain interval needs low < high")
    return rng.uniform(lo, hi, size=(n, lo.size))


def generate_synthetic(
    expr: KernelExpr,
    theta,
    n_seed: int = 256,
    n_data: int = 1000,
    domain=((-10.0,), (10.0,)),
    seed=0,
    X_data=None,
) -> Dataset:
    """Seed set from the GP prior, then exact posterior means at fresh inputs.

    Seed outputs are drawn from ``N(0, K + noise I)`` where the noise is the
    last entry of ``theta``. ``domain`` is ``(low, high)`` with one entry per
    input dimension. ``X_data`` overrides the random dataset inputs.
    """
    if n_seed < 1 or n_data < 1:
        raise ValueError("n_seed and n_data must be >= 1")
    theta = check_theta(expr, theta)
    rng = np.random.default_rng(seed)
    X0 = _uniform(rng, n_seed, domain)
    params, noise = split_theta(theta)
    K = np.asarray(expr.cov(params, X0, X0)) + float(noise) * np.eye(n_seed)
    try:
        L, _ = chol_jitter(K)
    except IllConditionedError as e:
        raise IllConditionedError(f"prior gram of the seed set: {e}") from e
    y0 = L @ rng.standard_normal(n_seed)
    X1 = _uniform(rng, n_data, domain) if X_data is None else np.asarray(X_data, dtype=float)
    mean, _ = full_gp_predict(expr, theta, Dataset(X0, y0), X1)
    return Dataset(X1, mean)
