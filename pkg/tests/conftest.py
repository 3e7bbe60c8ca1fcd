import numpy as np
import pytest
from hypothesis import settings

from dmrbsde.boundaries import LossFn, LossPair, TimeFn
from dmrbsde.grid import make_grid, sample_ensemble

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_ens():
    return sample_ensemble(make_grid(1.0, 50), 4000, seed=21)


@pytest.fixture(scope="session")
def mid_ens():
    return sample_ensemble(make_grid(1.0, 100), 20000, seed=5)


@pytest.fixture(scope="session")
def hand_losses():
    # E[Y] <= 2 and E[Y] >= 1 - 2t
    return LossPair(LossFn.affine(TimeFn.constant(2.0)), LossFn.affine(TimeFn.poly([1.0, -2.0])), gap=1.0)


@pytest.fixture(scope="session")
def wide_losses():
    return LossPair(LossFn.affine(TimeFn.constant(50.0)), LossFn.affine(TimeFn.constant(-50.0)), gap=100.0)


def hand_mean(times):
    return np.maximum(1.0 - 2.0 * times, 0.0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
