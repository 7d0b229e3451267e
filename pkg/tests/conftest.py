import pytest
from hypothesis import HealthCheck, settings

from ttplab.fields import build_scenario
from ttplab.kinetics import init_p0_state, quadrature_grid

settings.register_profile("ttplab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ttplab")


@pytest.fixture(scope="session")
def uniform():
    return build_scenario("uniform")


@pytest.fixture(scope="session")
def rigid():
    return build_scenario("rigid-rotation")


@pytest.fixture(scope="session")
def tg():
    return build_scenario("taylor-green")


@pytest.fixture(scope="session")
def manufactured():
    return build_scenario("manufactured-compressible")


@pytest.fixture(scope="session")
def tg_state(tg):
    grid = quadrature_grid(tg, 8)
    return grid, init_p0_state(tg, 0.0, grid)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
