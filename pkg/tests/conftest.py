import numpy as np
import pytest

from looseqa.autodiff import Tape, backward


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def analytic_grads(build, params):
    """Run ``build()`` on a fresh tape and backprop; return copies of the grads."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    return [p.grad.copy() for p in params]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def fd():
    return central_difference


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
