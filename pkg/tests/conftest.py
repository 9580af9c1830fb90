import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from commtraj.channel import ChannelParams
from commtraj.dynamics import QuadrotorParams

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def quad():
    return QuadrotorParams()


@pytest.fixture
def chan():
    return ChannelParams()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_admissible(rng, p, n):
    """Random states inside the attitude limits and bounded controls."""
    X = np.empty((n, 12))
    X[:, :3] = rng.uniform(-500, 500, (n, 3))
    X[:, 3:6] = rng.uniform(-15, 15, (n, 3))
    X[:, 6] = rng.uniform(-p.phi_max, p.phi_max, n)
    X[:, 7] = rng.uniform(-p.theta_max, p.theta_max, n)
    X[:, 8] = rng.uniform(-np.pi, np.pi, n)
    X[:, 9:] = rng.uniform(-3, 3, (n, 3))
    U = np.empty((n, 4))
    U[:, 0] = rng.uniform(0, p.u1_max, n)
    U[:, 1:] = rng.uniform(-1, 1, (n, 3)) * np.asarray(p.torque_max)
    return X, U


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
