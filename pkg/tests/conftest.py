import numpy as np
import pytest

from nllfr import excite, truth
from nllfr.model import DUFFING, CHAIN2DOF


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_design():
    return excite.MultisineDesign.band(N=1024, fs=128.0, f_max=10.0, rms=12.0)


@pytest.fixture(scope="session")
def duffing_small(small_design):
    """Noise-free Duffing steady state, 3 realizations of 2 periods."""
    rng = np.random.default_rng(7)
    return truth.steady_state_data(truth.duffing_system(), small_design, 3, 2, rng)


@pytest.fixture(scope="session")
def linear_small(small_design):
    """Same design on the Duffing system with the cubic term removed."""
    rng = np.random.default_rng(8)
    return truth.steady_state_data(truth.duffing_system(k3=0.0), small_design, 3, 2, rng)


@pytest.fixture
def duffing_spec():
    return DUFFING


@pytest.fixture
def chain_spec():
    return CHAIN2DOF


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion and assert it."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
