import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

import vbks  # noqa: F401  (enables float64 in jax)
from vbks.kernels import Base, Product, Sum

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

BASES = ("SE", "PER", "LIN", "RQ")


def kernel_exprs(max_leaves=4):
    leaf = st.sampled_from(BASES).map(Base)
    return st.recursive(
        leaf,
        lambda kids: st.tuples(st.sampled_from([Sum, Product]), kids, kids).map(lambda t: t[0](t[1], t[2])),
        max_leaves=max_leaves,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_theta(expr, rng, spread=0.3):
    return rng.normal(0.0, spread, expr.n_hyper)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
