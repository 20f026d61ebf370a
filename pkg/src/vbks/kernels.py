"""
Composite kernels as expression trees over the base kernels SE, PER, LIN, RQ.

Hyperparameters are carried as a flat raw vector ``theta``: the leaf parameters
in tree order (left to right) followed by one noise variance. Every raw entry is
the log of a positive quantity. Per-leaf layout::

    SE   log variance, log lengthscale
    PER  log variance, log lengthscale, log period
    LIN  log lengthscale
    RQ   log variance, log lengthscale, log alpha

Kernel formulas (r = ||x - x'||)::

    SE   v * exp(-r^2 / (2 l^2))
    PER  v * exp(-2 sin^2(pi r / p) / l^2)
    LIN  <x, x'> / l^2
    RQ   v * (1 + r^2 / (2 alpha l^2)) ** (-alpha)

The covariance functions are written against ``jax.numpy`` so they can be traced
and differentiated; the public helpers return plain numpy arrays.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from functools import cached_property

import jax.numpy as jnp
import numpy as np

BASE_PARAMS = {
    "SE": ("variance", "lengthscale"),
    "PER": ("variance", "lengthscale", "period"),
    "LIN": ("lengthscale",),
    "RQ": ("variance", "lengthscale", "alpha"),
}


class KernelSyntaxError(ValueError):
    pass


def _sqdist(X, X2):
    diff = X[:, None, :] - X2[None, :, :]
    return jnp.sum(diff * diff, axis=-1)


@dataclass(frozen=True)
class KernelExpr:
    """Node of a kernel expression tree. Use ``Base``, ``Sum`` or ``Product``."""

    @property
    def n_kernel_params(self) -> int:
        raise NotImplementedError

    @property
    def n_hyper(self) -> int:
        """Length of the raw hyperparameter vector, noise included."""
        return self.n_kernel_params + 1

    @property
    def name(self) -> str:
        raise NotImplementedError

    @cached_property
    def canonical_name(self) -> str:
        return self.canonical().name

    def __str__(self):
        return self.name

    def __add__(self, other):
        return Sum(self, other)

    def __mul__(self, other):
        return Product(self, other)

    def leaves(self) -> list[Base]:
        raise NotImplementedError

    def param_names(self) -> list[str]:
        names = []
        for i, leaf in enumerate(self.leaves()):
            names.extend(f"{leaf.kind}[{i}].{p}" for p in BASE_PARAMS[leaf.kind])
        return names + ["noise"]

    def canonical(self) -> KernelExpr:
        raise NotImplementedError

    def cov(self, params, X, X2):
        """Covariance matrix given the positive (exp-mapped) kernel parameters."""
        raise NotImplementedError

    def diag(self, params, X):
        """Diagonal of ``cov(params, X, X)`` without forming the full matrix."""
        raise NotImplementedError


@dataclass(frozen=True)
class Base(KernelExpr):
    kind: str

    def __post_init__(self):
        if self.kind not in BASE_PARAMS:
            raise KernelSyntaxError(f"unknown base kernel {self.kind!r}")

    @property
    def n_kernel_params(self):
        return len(BASE_PARAMS[self.kind])

    @property
    def name(self):
        return self.kind

    def leaves(self):
        return [self]

    def canonical(self):
        return self

    def cov(self, params, X, X2):
        if self.kind == "LIN":
            return (X @ X2.T) / params[0] ** 2
        r2 = _sqdist(X, X2)
        if self.kind == "SE":
            return params[0] * jnp.exp(-0.5 * r2 / params[1] ** 2)
        if self.kind == "PER":
            r = jnp.sqrt(jnp.maximum(r2, 0.0))
            s = jnp.sin(jnp.pi * r / params[2])
            return params[0] * jnp.exp(-2.0 * s * s / params[1] ** 2)
        # RQ
        alpha = params[2]
        return params[0] * (1.0 + r2 / (2.0 * alpha * params[1] ** 2)) ** (-alpha)

    def diag(self, params, X):
        if self.kind == "LIN":
            return jnp.sum(X * X, axis=-1) / params[0] ** 2
        return jnp.full(X.shape[0], params[0])


@dataclass(frozen=True)
class _Binary(KernelExpr):
    left: KernelExpr
    right: KernelExpr

    symbol = "?"

    @property
    def n_kernel_params(self):
        return self.left.n_kernel_params + self.right.n_kernel_params

    def leaves(self):
        return self.left.leaves() + self.right.leaves()

    def _operands(self) -> list[KernelExpr]:
        # flatten a same-operator chain (associativity)
        out = []
        for child in (self.left, self.right):
            if type(child) is type(self):
                out.extend(child._operands())
            else:
                out.append(child)
        return out

    def canonical(self):
        ops = [op.canonical() for op in self._operands()]
        ops.sort(key=lambda e: _render(e, parent=type(self)))
        tree = ops[0]
        for op in ops[1:]:
            tree = type(self)(tree, op)
        return tree

    def _split(self, params):
        n = self.left.n_kernel_params
        return params[:n], params[n:]


class Sum(_Binary):
    symbol = "+"

    @property
    def name(self):
        right = self.right.name
        if isinstance(self.right, Sum):
            right = f"({right})"
        return f"{self.left.name}+{right}"

    def cov(self, params, X, X2):
        pl, pr = self._split(params)
        return self.left.cov(pl, X, X2) + self.right.cov(pr, X, X2)

    def diag(self, params, X):
        pl, pr = self._split(params)
        return self.left.diag(pl, X) + self.right.diag(pr, X)


class Product(_Binary):
    symbol = "*"

    @property
    def name(self):
        left = self.left.name
        if isinstance(self.left, Sum):
            left = f"({left})"
        right = self.right.name
        if isinstance(self.right, (Sum, Product)):
            right = f"({right})"
        return f"{left}*{right}"

    def cov(self, params, X, X2):
        pl, pr = self._split(params)
        return self.left.cov(pl, X, X2) * self.right.cov(pr, X, X2)

    def diag(self, params, X):
        pl, pr = self._split(params)
        return self.left.diag(pl, X) * self.right.diag(pr, X)


def _render(expr, parent):
    s = expr.name
    if parent is Product and isinstance(expr, Sum):
        return f"({s})"
    return s


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\s*(?:([A-Za-z]+)|(.))")


def _tokenize(text):
    tokens = []
    for m in _TOKEN.finditer(text):
        word, sym = m.groups()
        if word:
            tokens.append(word.upper())
        elif sym is not None and not sym.isspace():
            if sym not in "+*()":
                raise KernelSyntaxError(f"unexpected character {sym!r} in {text!r}")
            tokens.append(sym)
    return tokens


def parse_kernel(text: str) -> KernelExpr:
    """Parse ``"PER*LIN+SE"``-style text; ``*`` binds tighter than ``+``.

    Chains nest to the left, so ``"A*B*C"`` is ``Product(Product(A, B), C)``.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise KernelSyntaxError("empty kernel expression")
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        tok = peek()
        pos += 1
        return tok

    def expr():
        node = term()
        while peek() == "+":
            take()
            node = Sum(node, term())
        return node

    def term():
        node = factor()
        while peek() == "*":
            take()
            node = Product(node, factor())
        return node

    def factor():
        tok = take()
        if tok == "(":
            node = expr()
            if take() != ")":
                raise KernelSyntaxError(f"unbalanced parentheses in {text!r}")
            return node
        if tok is None or tok in "+*)":
            raise KernelSyntaxError(f"malformed kernel expression {text!r}")
        return Base(tok)

    node = expr()
    if pos != len(tokens):
        raise KernelSyntaxError(f"trailing input in {text!r}")
    return node


def read_kernel_file(path) -> list[KernelExpr]:
    """One kernel expression per line; blank lines and ``#`` comments skipped."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(parse_kernel(line))
    return out


# ---------------------------------------------------------------------------
# grammar


def expand_grammar(bases, level: int) -> list[KernelExpr]:
    """All kernels reachable from ``bases`` in at most ``level - 1`` compositions.

    Each step adds ``e + b`` and ``e * b`` for every expression ``e`` of the
    previous level and base ``b``. Duplicates are removed by canonical name, so
    sums and products are treated as commutative and associative. With the four
    base kernels and ``level=3`` this yields 144 kernels.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    bases = [Base(b) if isinstance(b, str) else b for b in bases]
    if not bases:
        raise ValueError("empty base kernel set")
    seen = {}
    for b in bases:
        seen.setdefault(b.canonical_name, b.canonical())
    frontier = list(seen.values())
    for _ in range(level - 1):
        new = []
        for e, b in itertools.product(frontier, bases):
            for cand in (Sum(e, b), Product(e, b)):
                key = cand.canonical_name
                if key not in seen:
                    seen[key] = cand.canonical()
                    new.append(seen[key])
        frontier = list(seen.values())
    return list(seen.values())


# ---------------------------------------------------------------------------
# evaluation


def check_theta(expr: KernelExpr, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != expr.n_hyper:
        raise ValueError(
            f"{expr.name} needs {expr.n_hyper} hyperparameters, got shape {theta.shape}"
        )
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite hyperparameters")
    return theta


def split_theta(theta):
    """Map a raw vector to (positive kernel parameters, noise variance)."""
    pos = jnp.exp(theta)
    return pos[:-1], pos[-1]


def _as_inputs(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


def gram_matrix(expr: KernelExpr, theta, X, X2=None) -> np.ndarray:
    theta = check_theta(expr, theta)
    X = _as_inputs(X)
    X2 = X if X2 is None else _as_inputs(X2, "X2")
    if X.shape[1] != X2.shape[1]:
        raise ValueError("input dimension mismatch")
    params, _ = split_theta(theta)
    return np.asarray(expr.cov(params, X, X2))


def eval_kernel(expr: KernelExpr, theta, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.ndim != 1:
        raise ValueError("inputs must be points of equal dimension")
    return float(gram_matrix(expr, theta, x[None, :], x2[None, :])[0, 0])


def default_theta(expr: KernelExpr, X, y) -> np.ndarray:
    """Moment-matched starting hyperparameters (raw, log scale).

    Lengthscales and periods start at the median pairwise input distance,
    signal variances at the output variance, LIN scales so that k(x, x)
    averages the output variance, RQ alpha at 1 and the noise at a tenth of
    the output variance.
    """
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float)
    var = float(np.var(y)) if y.size > 1 else 1.0
    var = var if var > 0 else 1.0
    sub = X[: min(len(X), 500)]
    d = np.sqrt(np.sum((sub[:, None, :] - sub[None, :, :]) ** 2, axis=-1))
    d = d[np.triu_indices(len(sub), 1)]
    med = float(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    lin_scale = float(np.sqrt(np.mean(np.sum(X * X, axis=1)) / var)) or 1.0
    raw = []
    for leaf in expr.leaves():
        if leaf.kind == "LIN":
            raw.append(np.log(lin_scale))
            continue
        raw += [np.log(var), np.log(med)]
        if leaf.kind == "PER":
            raw.append(np.log(med))
        elif leaf.kind == "RQ":
            raw.append(0.0)
    raw.append(np.log(0.1 * var))
    return np.array(raw)
