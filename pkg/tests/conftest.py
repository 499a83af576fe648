import importlib.util

import numpy as np
import pytest

from afldp.models import Dataset, ModelSpec, make_quadratic

HAVE_MLXTEND = importlib.util.find_spec("mlxtend") is not None
needs_mnist = pytest.mark.skipif(not HAVE_MLXTEND, reason="bundled MNIST needs mlxtend")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_binary():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((60, 5))
    y = (X @ np.array([1.0, -2.0, 0.5, 0.0, 1.5]) > 0).astype(np.int64)
    return Dataset(X, y, "toy")


@pytest.fixture
def toy_multiclass():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((80, 6))
    y = rng.integers(0, 4, 80)
    return Dataset(X, y, "toy4")


@pytest.fixture
def quad():
    return make_quadratic(8, condition=5.0, noise_sigma=0.7, n_samples=400, seed=3)


def logistic_spec(dim, lam=1e-3):
    return ModelSpec("logistic", dim, 2, lam)


def svm_spec(dim, classes, lam=1e-3):
    return ModelSpec("svm", dim, classes, lam)


ACCEPTANCE_LINES = []


def acceptance_report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
