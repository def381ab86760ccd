import sys

import numpy as np
import pytest

from ctxnmt import tensor as T


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
