import os
import sys

import numpy as np
import pytest

from sast._backend import HAS_NUMBA, use_kernels, use_numeric

sys.path.insert(0, os.path.dirname(__file__))

BACKENDS = ["numpy"] + (["numba"] if HAS_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    with use_kernels(request.param):
        yield request.param


@pytest.fixture(autouse=True)
def _f64():
    with use_numeric("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: int(k[1:])):
            terminalreporter.write_line(RESULTS[key])
