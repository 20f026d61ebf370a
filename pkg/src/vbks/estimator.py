"""Scikit-learn style regressor wrapping the two-stage kernel selection."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from vbks.belief import BeliefConfig, init_belief, optimize_belief, ranking
from vbks.gp_core import Dataset, choose_inducing
from vbks.kernels import KernelExpr, expand_grammar, parse_kernel
from vbks.local_elbo import LocalConfig, TrainingAborted, init_state, optimize_local
from vbks.prediction import predict_bma, predict_kernel

log = logging.getLogger(__name__)


def kernel_seed(seed: int, expr: KernelExpr) -> int:
    """Per-kernel seed that depends only on the run seed and the kernel itself."""
    return zlib.crc32(f"{seed}:{expr.canonical_name}".encode())


def resolve_kernels(kernels=None, grammar_level=None, bases=("SE", "PER", "LIN", "RQ")):
    if kernels is not None and grammar_level is not None:
        raise ValueError("give either kernels or grammar_level, not both")
    if grammar_level is not None:
        return expand_grammar(bases, grammar_level)
    if kernels is None:
        raise ValueError("no kernel set given")
    out = [parse_kernel(k) if isinstance(k, str) else k for k in kernels]
    names = [k.canonical_name for k in out]
    if len(set(names)) != len(names):
        raise ValueError("kernel set contains duplicates after canonicalization")
    return out


def train_states(exprs, data, U, config, point_theta=False, seed=0, workers=1, states=None, on_chunk=None):
    """Optimize one local ELBO per kernel, concurrently.

    ``states`` optionally supplies partially trained states to resume from.
    ``on_chunk(i, state, rows)`` is forwarded from ``optimize_local``. Returns
    ``(states, failures)`` where failed kernels map index -> reason.
    """

    def one(i):
        expr = exprs[i]
        st = None if states is None else states[i]
        try:
            if st is None:
                st = init_state(expr, data, U, point_theta=point_theta, seed=kernel_seed(seed, expr))
            remaining = config.steps - st.step
            if remaining <= 0:
                return st, None
            cb = None if on_chunk is None else (lambda s, rows: on_chunk(i, s, rows))
            cfg = LocalConfig(**{**config.__dict__, "steps": remaining})
            st = optimize_local(st, data, cfg, on_chunk=cb)
            if not np.isfinite(st.elbo_star):
                raise TrainingAborted(f"{expr.canonical_name}: no finite ELBO estimate", st)
            return st, None
        except (TrainingAborted, FloatingPointError, np.linalg.LinAlgError) as e:
            log.warning("kernel %s excluded: %s", expr.canonical_name, e)
            return None, str(e)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(exprs))))
    else:
        results = [one(i) for i in range(len(exprs))]
    trained = [r[0] for r in results]
    failures = {i: r[1] for i, r in enumerate(results) if r[1] is not None}
    return trained, failures


class VBKSRegressor(RegressorMixin, BaseEstimator):
    """Sparse GP regression averaged over a posterior on a finite kernel set.

    Each candidate kernel gets its own sparse GP trained by stochastic gradient
    ascent on its local ELBO. The frozen local optima then drive a softmax
    belief over kernels, and predictions are the posterior-weighted mixture.

    Parameters
    ----------
    kernels : list of str or KernelExpr, optional
        Candidate kernels. Exclusive with ``grammar_level``.
    grammar_level : int, optional
        Use every kernel of the base grammar up to this level.
    n_inducing : int
        Size of the inducing set, a random subset of the training inputs.
    theta_mode : {"full", "point"}
        Gaussian or point-estimate hyperparameters.
    normalize_y : bool
        Standardize outputs before training.
    """

    def __init__(
        self,
        kernels=None,
        grammar_level=None,
        n_inducing=16,
        batch_size=32,
        local_steps=2000,
        learning_rate=1e-2,
        n_eta_lik=1,
        n_eta_ce=4,
        belief_steps=2000,
        belief_learning_rate=0.05,
        n_posterior_samples=2000,
        n_theta_draws=100,
        theta_mode="full",
        prior_mean=None,
        normalize_y=True,
        n_jobs=1,
        random_state=0,
    ):
        self.kernels = kernels
        self.grammar_level = grammar_level
        self.n_inducing = n_inducing
        self.batch_size = batch_size
        self.local_steps = local_steps
        self.learning_rate = learning_rate
        self.n_eta_lik = n_eta_lik
        self.n_eta_ce = n_eta_ce
        self.belief_steps = belief_steps
        self.belief_learning_rate = belief_learning_rate
        self.n_posterior_samples = n_posterior_samples
        self.n_theta_draws = n_theta_draws
        self.theta_mode = theta_mode
        self.prior_mean = prior_mean
        self.normalize_y = normalize_y
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _local_config(self, n):
        batch = None if self.batch_size is None else min(self.batch_size, n)
        return LocalConfig(
            steps=self.local_steps,
            batch_size=batch,
            learning_rate=self.learning_rate,
            n_eta_lik=self.n_eta_lik,
            n_eta_ce=self.n_eta_ce,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.theta_mode not in ("full", "point"):
            raise ValueError("theta_mode must be 'full' or 'point'")
        exprs = resolve_kernels(self.kernels, self.grammar_level)
        seed = 0 if self.random_state is None else int(self.random_state)
        data = Dataset.standardized(X, y, inputs=False, outputs=self.normalize_y)
        U = choose_inducing(data.X, min(self.n_inducing, len(np.unique(data.X, axis=0))), seed)
        states, failures = train_states(
            exprs,
            data,
            U,
            self._local_config(len(data)),
            point_theta=self.theta_mode == "point",
            seed=seed,
            workers=self.n_jobs,
        )
        keep = [i for i, s in enumerate(states) if s is not None]
        if not keep:
            raise RuntimeError("training failed for every kernel: " + "; ".join(failures.values()))
        prior = None if self.prior_mean is None else np.asarray(self.prior_mean, dtype=float)[keep]
        belief = init_belief(
            [exprs[i].canonical_name for i in keep],
            [states[i].elbo_star for i in keep],
            prior_mean=prior,
            n_samples=self.n_posterior_samples,
            seed=seed,
        )
        belief = optimize_belief(belief, BeliefConfig(self.belief_steps, self.belief_learning_rate))
        self.data_ = data
        self.inducing_ = U
        self.states_ = [states[i] for i in keep]
        self.kernel_names_ = list(belief.names)
        self.failed_ = {exprs[i].canonical_name: r for i, r in failures.items()}
        self.belief_ = belief
        self.posterior_ = belief.posterior
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def best_kernel_(self) -> str:
        check_is_fitted(self, "belief_")
        return self.kernel_names_[ranking(self.belief_)[0]]

    def _inputs(self, X):
        check_is_fitted(self, "belief_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def _finish(self, mean, var, return_std):
        mean, var = self.data_.restore_outputs(mean, np.maximum(var, 0.0))
        return (mean, np.sqrt(var)) if return_std else mean

    def predict(self, X, return_std=False, observation=False):
        """Model-averaged predictive mean (and standard deviation)."""
        X = self._inputs(X)
        mean, var = predict_bma(
            self.states_, self.posterior_, X, self.n_theta_draws, self.random_state or 0, observation
        )
        return self._finish(mean, var, return_std)

    def predict_single(self, X, return_std=False, observation=False):
        """Prediction from the single most probable kernel."""
        X = self._inputs(X)
        i = ranking(self.belief_)[0]
        mean, var = predict_kernel(self.states_[i], X, self.n_theta_draws, self.random_state or 0, observation)
        return self._finish(mean, var, return_std)
