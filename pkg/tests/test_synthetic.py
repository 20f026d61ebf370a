import math

import numpy as np
import pytest

from vbks.kernels import Base, gram_matrix, parse_kernel
from vbks.synthetic import (
    BENCHMARK_KERNELS,
    DEFAULT_NOISE,
    benchmark_kernels,
    generate_synthetic,
    true_kernel,
)


class TestTrueKernels:
    def test_generating_hyperparameters(self):
        expr, theta = true_kernel("(PER+RQ)*LIN")
        assert expr.canonical_name == parse_kernel("(PER+RQ)*LIN").canonical_name
        values = np.exp(theta)
        # PER: variance 0.1^2, lengthscale 2, period 2 pi
        np.testing.assert_allclose(values[:3], [0.01, 2.0, 2 * math.pi], rtol=1e-12)
        # RQ: variance 0.1^2, lengthscale 3, shape 1; LIN lengthscale 5
        np.testing.assert_allclose(values[3:7], [0.01, 3.0, 1.0, 5.0], rtol=1e-12)
        assert values[-1] == pytest.approx(DEFAULT_NOISE)

    def test_noise_override(self):
        _, theta = true_kernel("PER*LIN*RQ", noise=0.5)
        assert math.exp(theta[-1]) == pytest.approx(0.5)

    def test_unknown(self):
        with pytest.raises(KeyError):
            true_kernel("SE")

    def test_benchmark_set(self):
        ks = benchmark_kernels()
        assert len(ks) == 12
        assert len({k.canonical_name for k in ks}) == 12
        assert "(PER+RQ)*LIN" in BENCHMARK_KERNELS and "PER*LIN*RQ" in BENCHMARK_KERNELS


class TestGenerate:
    def test_default_benchmark_configuration(self):
        expr, theta = true_kernel("(PER+RQ)*LIN")
        d = generate_synthetic(expr, theta, n_seed=256, n_data=1000, seed=0)
        assert d.X.shape == (1000, 1) and d.y.shape == (1000,)
        assert np.all((d.X >= -10) & (d.X <= 10))
        assert np.all(np.isfinite(d.y))

    def test_deterministic(self):
        expr, theta = true_kernel("PER*LIN*RQ")
        a = generate_synthetic(expr, theta, n_seed=64, n_data=100, seed=5)
        b = generate_synthetic(expr, theta, n_seed=64, n_data=100, seed=5)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
        c = generate_synthetic(expr, theta, n_seed=64, n_data=100, seed=6)
        assert not np.array_equal(a.y, c.y)

    def test_interpolates_single_seed_point(self):
        # one seed point and near-zero noise: every output equals the sampled seed value
        theta = np.log([1.0, 1e6, 1e-12])  # huge lengthscale so k(x, x0) = k(x0, x0)
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-10, 10, (1, 1))
        y0 = math.sqrt(1.0 + 1e-12) * rng.standard_normal(1)
        d = generate_synthetic(Base("SE"), theta, n_seed=1, n_data=5, seed=3, X_data=np.repeat(x0, 5, axis=0))
        np.testing.assert_allclose(d.y, y0[0], rtol=1e-9)

    def test_inputs_override(self):
        expr, theta = true_kernel("(PER+RQ)*LIN")
        X = np.linspace(-10, 10, 7)[:, None]
        d = generate_synthetic(expr, theta, n_seed=32, seed=1, X_data=X)
        np.testing.assert_array_equal(d.X, X)

    def test_seed_covariance_monte_carlo(self):
        # one seed point and a huge lengthscale: every output is v / (v + s2) * y0
        # with y0 ~ N(0, v + s2), so the covariance of any two outputs across
        # seeds is v^2 / (v + s2)
        v, s2 = 1.5, 0.5
        theta = np.log([v, 1e6, s2])
        X = np.array([[-4.0], [7.0]])
        ys = np.array([generate_synthetic(Base("SE"), theta, n_seed=1, seed=s, X_data=X).y for s in range(4000)])
        prod = ys[:, 0] * ys[:, 1]
        assert abs(prod.mean() - v**2 / (v + s2)) <= 3 * prod.std() / math.sqrt(len(prod))
        assert abs(ys.mean(0)).max() <= 3 * ys.std(0).max() / math.sqrt(len(ys))

    @pytest.mark.parametrize("name", ["(PER+RQ)*LIN", "PER*LIN*RQ"])
    @pytest.mark.parametrize("seed", range(3))
    def test_sanity_band(self, name, seed):
        expr, theta = true_kernel(name)
        d = generate_synthetic(expr, theta, n_seed=128, n_data=300, seed=seed)
        grid = np.linspace(-10, 10, 201)[:, None]
        prior_sd = math.sqrt(np.max(np.diag(gram_matrix(expr, theta, grid))))
        assert np.all(np.abs(d.y) <= 8 * prior_sd)

    def test_validation(self):
        with pytest.raises(ValueError):
            generate_synthetic(Base("SE"), np.zeros(3), n_seed=0)
        with pytest.raises(ValueError):
            generate_synthetic(Base("SE"), np.zeros(3), domain=((1.0,), (0.0,)))

    def test_unfactorizable_prior(self):
        # variance overflows to inf: the prior gram cannot be factorized
        with pytest.raises(ValueError):
            generate_synthetic(Base("SE"), [800.0, 0.0, 0.0], n_seed=4)
