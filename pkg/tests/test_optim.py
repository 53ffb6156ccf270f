import numpy as np
import pytest

from sweeper.model import Ball, Box
from sweeper.optim import Block, MaxIterations, ProductConstraint, projected_lbfgs


def quadratic(Q, c):
    def fg(z):
        return 0.5 * z @ Q @ z + c @ z, Q @ z + c
    return fg


class TestProjectedLBFGS:
    def test_unconstrained_interior(self):
        Q = np.diag([1.0, 4.0])
        c = np.array([-0.5, 1.0])
        con = ProductConstraint([Block(0, 2, Box(-np.ones(2), np.ones(2)))], 2)
        res = projected_lbfgs(quadratic(Q, c), np.zeros(2), con, kkt_tol=1e-10)
        assert res.converged
        assert res.z == pytest.approx([0.5, -0.25], abs=1e-9)

    def test_box_active(self):
        # min 1/2 |z - (2, -3)|^2 on [-1, 1]^2 -> (1, -1)
        con = ProductConstraint([Block(0, 2, Box(-np.ones(2), np.ones(2)))], 2)
        res = projected_lbfgs(quadratic(np.eye(2), np.array([-2.0, 3.0])), np.zeros(2), con, kkt_tol=1e-12)
        assert res.z == pytest.approx([1.0, -1.0], abs=1e-12)
        assert res.f == pytest.approx(0.5 * (1 + 4) - 0.5 * 13, abs=1e-12)

    def test_coupled_box_qp(self):
        # min 1/2 z^T Q z + c^T z with z_1 <= 0 active: solution z = (0, -c_2/Q_22 - Q_21 z_1/Q_22)
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        c = np.array([-1.0, 0.3])
        con = ProductConstraint([Block(0, 1, Box(np.array([-5.0]), np.array([0.0]))),
                                 Block(1, 2, Box(np.array([-5.0]), np.array([5.0])))], 2)
        res = projected_lbfgs(quadratic(Q, c), np.array([-1.0, 1.0]), con, kkt_tol=1e-12)
        assert res.z == pytest.approx([0.0, -0.3], abs=1e-10)
        # multiplier of the active bound is nonnegative
        assert res.g[0] <= 0.0

    def test_ball_block(self):
        con = ProductConstraint([Block(0, 2, Ball(np.zeros(2), 1.0))], 2)
        res = projected_lbfgs(quadratic(np.eye(2), np.array([-3.0, -4.0])), np.zeros(2), con, kkt_tol=1e-12)
        assert res.z == pytest.approx([0.6, 0.8], abs=1e-10)

    def test_monotone_trace(self):
        Q = np.diag(np.linspace(1.0, 50.0, 10))
        c = np.linspace(-3.0, 3.0, 10)
        con = ProductConstraint([Block(0, 10, Box(-0.05 * np.ones(10), 0.05 * np.ones(10)))], 10)
        res = projected_lbfgs(quadratic(Q, c), np.zeros(10), con, kkt_tol=1e-10)
        f = [row[1] for row in res.trace]
        assert all(b <= a for a, b in zip(f, f[1:]))
        assert res.z == pytest.approx(np.clip(-c / np.diag(Q), -0.05, 0.05), abs=1e-9)

    def test_max_iterations(self):
        def rosen(z):
            x, y = z
            f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
            return f, np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])

        con = ProductConstraint([Block(0, 2, Box(-2 * np.ones(2), 2 * np.ones(2)))], 2)
        with pytest.raises(MaxIterations) as err:
            projected_lbfgs(rosen, np.array([-1.2, 1.0]), con, max_iter=2)
        assert err.value.z.shape == (2,)
        res = projected_lbfgs(rosen, np.array([-1.2, 1.0]), con, max_iter=2, raise_on_maxiter=False)
        assert not res.converged

    def test_rosenbrock_converges(self):
        def rosen(z):
            x, y = z
            f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
            return f, np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])

        con = ProductConstraint([Block(0, 2, Box(-2 * np.ones(2), 2 * np.ones(2)))], 2)
        res = projected_lbfgs(rosen, np.array([-1.2, 1.0]), con, kkt_tol=1e-9, max_iter=1000)
        assert res.z == pytest.approx([1.0, 1.0], abs=1e-6)

    def test_stationarity(self):
        con = ProductConstraint([Block(0, 1, Box(np.array([0.0]), np.array([1.0])))], 1)
        assert con.stationarity(np.array([0.0]), np.array([2.0])) == 0.0
        assert con.stationarity(np.array([0.5]), np.array([2.0])) == 0.5
