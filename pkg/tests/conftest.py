import numpy as np
import pytest

from udpm import RngStream, Schedule, make_box_kernel


class CountingDenoiser:
    """Predicts zeros and counts how often it is called."""

    def __init__(self, shape):
        self.shape = shape
        self.calls = 0

    def __call__(self, x_l, level, class_id=None):
        self.calls += 1
        return np.zeros(self.shape)


@pytest.fixture
def box2():
    return make_box_kernel(2)


@pytest.fixture
def sched3(box2):
    return Schedule.for_kernel(box2, 3)


@pytest.fixture
def rng():
    return RngStream(1234, 0)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
