"""Variational Bayesian kernel selection for sparse GP regression."""

import jax

jax.config.update("jax_enable_x64", True)

from vbks.kernels import (  # noqa: E402
    Base,
    KernelExpr,
    Product,
    Sum,
    eval_kernel,
    expand_grammar,
    gram_matrix,
    parse_kernel,
)
from vbks.gp_core import Dataset, chol_jitter, full_gp_predict  # noqa: E402
from vbks.estimator import VBKSRegressor  # noqa: E402

__all__ = [
    "Base",
    "Dataset",
    "KernelExpr",
    "Product",
    "Sum",
    "VBKSRegressor",
    "chol_jitter",
    "eval_kernel",
    "expand_grammar",
    "full_gp_predict",
    "gram_matrix",
    "parse_kernel",
]

__version__ = "0.1.0"
