import numpy as np
import pytest

from soilecho.fmcw import ChirpConfig
from soilecho.physics import SensorGeometry, get_preset

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def cfg():
    return ChirpConfig()


@pytest.fixture
def geom():
    return SensorGeometry()


@pytest.fixture
def loamy():
    return get_preset("loamy")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
