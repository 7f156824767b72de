import numpy as np
import pytest
from scipy import sparse

from glgnn.numerics import Tape, Tensor, backward


def dense(a):
    a = a.data if isinstance(a, Tensor) else a
    return a.toarray() if sparse.issparse(a) else np.asarray(a)


def grad_check(build, inputs, h=1e-5, coords=None, rng=None):
    """Largest relative error between tape gradients and central differences.

    ``build(tensors) -> 1x1 Tensor``; ``inputs`` maps names to arrays.
    ``coords`` limits the check to that many random coordinates per input.
    """
    rng = rng or np.random.default_rng(0)
    tensors = {k: Tensor(np.array(v, dtype=np.float64)) for k, v in inputs.items()}
    with Tape() as tape:
        tape.watch_all(tensors)
        loss = build(tensors)
    grads = backward(tape, loss)

    def value():
        return build(tensors).item()

    worst, checked = 0.0, 0
    for name, t in tensors.items():
        idx = list(np.ndindex(t.data.shape))
        if coords is not None and len(idx) > coords:
            idx = [idx[i] for i in rng.choice(len(idx), coords, replace=False)]
        for ix in idx:
            old = t.data[ix]
            t.data[ix] = old + h
            up = value()
            t.data[ix] = old - h
            down = value()
            t.data[ix] = old
            fd = (up - down) / (2 * h)
            an = grads[name][ix]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
            checked += 1
    return worst, checked


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each at the end of the session
ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}: {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
