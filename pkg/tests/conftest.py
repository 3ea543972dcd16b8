import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tpcrtrl.cells import CellDims, init_parameters

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def one_hot_batch(rng, n, shape):
    return np.eye(n)[rng.integers(0, n, shape)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tanh_small():
    return init_parameters("tanh_rnn", CellDims(3, 4, 3), seed=0)


@pytest.fixture
def lru_small():
    return init_parameters("lru", CellDims(3, 5, 3, recurrent_size=4), seed=0)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
