import numpy as np
import pytest

from satfeel.constellation import ConstellationSpec
from satfeel.learnkit import gen_synthetic


@pytest.fixture(scope="session")
def small_spec():
    return ConstellationSpec(num_planes=4, sats_per_plane=5)


@pytest.fixture(scope="session")
def small_data():
    return gen_synthetic(num_devices=20, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
