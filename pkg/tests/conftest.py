import numpy as np
import pytest

from pmdkit.simulator import Albedo, make_analytic_surface, make_scene


@pytest.fixture(scope="session")
def flat_scene():
    return make_scene(make_analytic_surface("flat"))


@pytest.fixture(scope="session")
def relief_scene():
    return make_scene(make_analytic_surface("sinusoid", amp=0.1, period=20.0, axis="xy"))


@pytest.fixture(scope="session")
def textured_surface():
    return make_analytic_surface("sinusoid", amp=0.1, period=20.0, axis="xy",
                                 albedo=Albedo("noise", seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
