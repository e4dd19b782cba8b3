"""Shared fixtures and the acceptance-summary reporting hook."""
import numpy as np
import pytest

from rvemor.material import MaterialParams

# the two phases used throughout the tests: an elastoplastic matrix and
# stiff purely elastic particles
MATRIX = MaterialParams(E=1.0, nu=0.3, M0=0.01, h=0.02, m=1.05)
PARTICLE = MaterialParams(E=20.0, nu=0.3, M0=float("inf"), h=0.0, m=1.0)

ACCEPTANCE_LINES = []


@pytest.fixture
def matrix_params():
    return MATRIX


@pytest.fixture
def particle_params():
    return PARTICLE


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def record_acceptance(line):
    """Collect one summary line per acceptance criterion; printed at the end
    of the pytest run regardless of output capture."""
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
