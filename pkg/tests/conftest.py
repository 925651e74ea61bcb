import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ex51():
    from vrclf import reaction_network as rn
    return rn.example51_instance()


@pytest.fixture(scope="session")
def ex51_feedback(ex51):
    from vrclf import reaction_network as rn
    return rn.stabilize(ex51.network, ex51.conservation, ex51.config)


@pytest.fixture(scope="session")
def ex43():
    from vrclf import corollary_lab as cl
    return cl.example43_instance()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(LINES):
        terminalreporter.write_line(LINES[n])
