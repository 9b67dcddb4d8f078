import numpy as np
import pytest

from qsdsa.oracle import MeanFieldFiniteKernel

# finite instances used across the suite; all pass H0, minorization and lower/upper
SHIPPED_INSTANCES = [
    dict(m=3, kappa=0.9, beta=1.0, seed=0),
    dict(m=5, kappa=0.8, beta=2.0, seed=1),
    dict(m=8, kappa=0.6, beta=0.5, seed=3),
]


def instance(m, kappa, beta, seed):
    return MeanFieldFiniteKernel.random(m, kappa, beta, seed)


@pytest.fixture
def K5():
    return instance(5, 0.8, 2.0, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ---------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
