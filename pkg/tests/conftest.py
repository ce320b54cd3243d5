import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import max_rel_error, numeric_grad  # noqa: E402
from reschest import tensor as T  # noqa: E402

GRAD_H = 1e-2
GRAD_TOL = 1e-2


def gradcheck(fn, arrays, seed=0, h=GRAD_H):
    """Largest relative error between tape gradients and central differences
    of ``sum(fn(*tensors) * R)`` for a fixed random R, over every input."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    r = np.random.default_rng(seed).uniform(-1, 1, out.shape).astype(np.float32)
    T.backward(T.tensor_sum(T.mul(out, T.Tensor(r))))

    def f():
        with T.no_grad():
            return float((fn(*tensors).data.astype(np.float64) * r).sum())

    errs = []
    for t in tensors:
        num = numeric_grad(f, t.data, h)
        errs.append(max_rel_error(t.grad, num))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


# acceptance criteria outcomes, printed as one line each after the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
