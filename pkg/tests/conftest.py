import numpy as np
import pytest

from quantattack import tensor as T
from quantattack.data import Dataset


def numeric_grad(f, arrays, k, h=1e-5):
    """Central finite-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[k]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(base[k])
    it = np.nditer(base[k], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[k][i]
        base[k][i] = old + h
        fp = f(*base)
        base[k][i] = old - h
        fm = f(*base)
        base[k][i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grads(build, arrays):
    """Gradients of ``build(*tensors)`` w.r.t. every input array."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    T.backward(out)
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def tiny_images(n=40, classes=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = rng.uniform(0, 1, size=(n, 3, size, size))
    images[labels == 1, 0] = np.clip(images[labels == 1, 0] + 0.5, 0, 1)
    return Dataset(images, labels, classes, "tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
