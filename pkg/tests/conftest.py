import numpy as np
import pytest

from sweeper import geometry as geo
from sweeper.model import AffineField, Ball, Box, ControlPath, QuadraticPotential, System
from sweeper.scenario import load_scenario


def constant_system(S, f, Mbar, U=None):
    n = S.dim
    f = np.atleast_1d(np.asarray(f, dtype=float))
    U = U or Box(-np.ones(n), np.ones(n))
    return System(S, AffineField(np.zeros((n, n)), np.zeros((n, n)), f, "constant"),
                  QuadraticPotential.zero(n), U, float(Mbar))


def control_system(S, U, Mbar=1.0):
    n = S.dim
    return System(S, AffineField(np.zeros((n, n)), np.eye(n), np.zeros(n), "control_affine"),
                  QuadraticPotential.zero(n), U, float(Mbar))


@pytest.fixture(scope="session")
def slide1d():
    return load_scenario("slide1d")


@pytest.fixture(scope="session")
def reach1d():
    return load_scenario("reach1d")


@pytest.fixture(scope="session")
def disk_push():
    return load_scenario("disk-push")


@pytest.fixture(scope="session")
def disk_slide():
    return load_scenario("disk-slide")


@pytest.fixture(scope="session")
def interval_system():
    return constant_system(geo.interval(-1.0, 1.0, eta=0.9), [2.0], 2.0)


@pytest.fixture(scope="session")
def disk_system():
    return constant_system(geo.ball([0.0, 0.0], 1.0, eta=0.9), [1.0, 0.0], 1.0, Ball(np.zeros(2), 1.0))


@pytest.fixture(scope="session")
def reach1d_nc(reach1d):
    """NC-mode solution of the 1-D reach problem at gamma = 1e4."""
    from sweeper.ocp import solve_Pk

    return solve_Pk(reach1d.problem, reach1d.system, 1e4, mode="nc")


def zero_control(m, n_nodes=101):
    return ControlPath.constant(np.zeros(m), n_nodes)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
