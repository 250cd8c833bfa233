import numpy as np
import pytest

from mfg_fsolve.model import builtin_model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def switch_model():
    return builtin_model("two-state-switch")


@pytest.fixture(scope="session")
def crowd_model():
    return builtin_model("crowd-aversion-d3")


@pytest.fixture(scope="session")
def short_model():
    return builtin_model("short-horizon-d2")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
