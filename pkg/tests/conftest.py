import numpy as np
import pytest

from atseg import tensor as T
from atseg.tensor import Tape, Tensor

GRAD_EPS = 1e-3
GRAD_RTOL = 1e-2
GRAD_FLOOR = 1e-4

ACCEPTANCE_LINES = []


def grad_error(analytic, numeric):
    """max |a - n| / (|n| + 1e-4), the gradient-check statistic."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (np.abs(n) + GRAD_FLOOR)))


def check_gradients(fn, arrays, projection_seed=0):
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection, so every
    output element contributes. Returns the worst error over all inputs.
    """
    proj = {}

    def scalar(*tensors):
        out = fn(*tensors)
        if out.size == 1:
            return T.reshape(out, ())
        if out.shape not in proj:
            proj[out.shape] = np.random.default_rng(projection_seed).normal(size=out.shape)
        return T.sum_all(T.mul(out, Tensor(proj[out.shape])))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = scalar(*leaves)
    T.backward(loss, tape)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def partial(x, i=i):
            args = [Tensor(l.data) for l in leaves]
            args[i] = x
            return scalar(*args)

        numeric = T.finite_diff_grad(partial, leaf, GRAD_EPS)
        worst = max(worst, grad_error(leaf.grad, numeric.data))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
