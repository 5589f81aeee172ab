import numpy as np
import pytest

from scoredistill.config import build_oracle, load_preset
from scoredistill.oracle import GmmOracle
from scoredistill.schedule import build_schedule

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(1000)


@pytest.fixture(scope="session")
def two_class():
    return build_oracle(load_preset("two-class")["oracle"])


@pytest.fixture(scope="session")
def moons():
    return build_oracle(load_preset("two-moons-gmm")["oracle"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_oracle(rng, dim=None, n_classes=None) -> GmmOracle:
    dim = dim or int(rng.integers(1, 5))
    n_classes = n_classes or int(rng.integers(1, 4))
    classes = []
    for _ in range(n_classes):
        m = int(rng.integers(1, 4))
        w = rng.dirichlet(np.ones(m))
        w[-1] = 1.0 - w[:-1].sum()
        classes.append([(w[i], rng.normal(0, 2, dim), rng.uniform(0.2, 1.5)) for i in range(m)])
    prior = rng.dirichlet(np.ones(n_classes))
    prior[-1] = 1.0 - prior[:-1].sum()
    return GmmOracle(classes, prior)
