import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

settings.register_profile("repo", deadline=None, max_examples=150,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# eighths in [-4, 4]: float64 sums and differences of these are exact
grid = st.integers(-32, 32).map(lambda k: k / 8.0)
small = st.integers(1, 5)


def grid_matrix(m, n):
    return arrays(np.float64, (m, n), elements=grid)


def grid_vector(n):
    return arrays(np.float64, (n,), elements=grid)


@st.composite
def dilation_case(draw, max_dim=5):
    m, n = draw(st.integers(1, max_dim)), draw(st.integers(1, max_dim))
    return draw(grid_matrix(m, n)), draw(grid_vector(n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
