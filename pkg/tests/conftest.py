import numpy as np
import pytest

from scorefuse.prior import GaussianMixturePrior
from scorefuse.rng import stream


def make_gmm(shape=(1, 8, 8), k=4, seed=0, spread=1.0):
    rng = stream(seed)
    w = rng.uniform(0.5, 1.5, k)
    return GaussianMixturePrior(w / w.sum(), spread * rng.standard_normal((k,) + shape),
                                rng.uniform(0.05, 0.3, k))


@pytest.fixture
def gmm():
    return make_gmm()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str) -> None:
    """Log one acceptance outcome; printed again in the terminal summary."""
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
