import json
import math
import warnings

import numpy as np
import pytest

from conftest import constant_system, control_system
from sweeper import geometry as geo
from sweeper.dynamics import integrate_penalized
from sweeper.model import Box, ControlPath
from sweeper.nc import (DivergenceWarning, RegimeViolation, check_candidate, fit_multiplier, integrate_adjoint,
                        limit_residuals, nu_density, regime_check, residual_maximization, residual_transversality,
                        slackness_integral, weak_max_convexU)
from sweeper.ocp import EndpointCost, EndpointSet, PointSet, Transcription, solve_Pk
from sweeper.oracle import catching_up


@pytest.fixture(scope="module")
def free_disk():
    """x' = u in the unit disk with a wide box U; u = 0.1 keeps x deep inside."""
    sysm = control_system(geo.ball([0.0, 0.0], 1.0, eta=0.9), Box(-2 * np.ones(2), 2 * np.ones(2)), 4.0)
    u = ControlPath.constant([0.1, -0.1])
    run = integrate_penalized(sysm, 100.0, [0.0, 0.0], u)
    return sysm, u, run


@pytest.fixture(scope="module")
def nc_check(reach1d, reach1d_nc):
    r = reach1d_nc
    tb = catching_up(reach1d.system, reach1d.problem.reference.x0, reach1d.problem.reference.u, 1e-4)
    xbar = np.interp(r.run.t, tb.t, tb.x[:, 0])[:, None]
    return check_candidate(reach1d.system, reach1d.problem.g, r.run, r.control, r.u_center, r.x0_center,
                           r.C0k, r.C1k, xbar)


class TestAdjointArc:
    @pytest.mark.parametrize("gamma", [100.0, 1e3, 1e4])
    def test_constant_in_interior(self, gamma):
        sysm = constant_system(geo.ball([0.0, 0.0], 1.0, eta=0.9), [0.0, 0.0], 1.0)
        u = ControlPath.constant([0.0, 0.0])
        run = integrate_penalized(sysm, gamma, [0.0, 0.0], u)
        arc = integrate_adjoint(sysm, run, u, 0.5, [0.3, -0.4])
        assert np.max(np.abs(arc.p - [0.3, -0.4])) <= 1e-12

    def test_linear_in_terminal_value(self, free_disk, disk_slide):
        sysm = disk_slide.system
        run = integrate_penalized(sysm, 1e3, disk_slide.x0, disk_slide.control)
        u = disk_slide.control
        a = integrate_adjoint(sysm, run, u, 0.0, [1.0, 0.0])
        b = integrate_adjoint(sysm, run, u, 0.0, [0.0, 1.0])
        c = integrate_adjoint(sysm, run, u, 0.0, [0.7, -1.3])
        assert np.max(np.abs(c.p - (0.7 * a.p - 1.3 * b.p))) <= 1e-10

    def test_homogeneous(self, free_disk):
        sysm, u, run = free_disk
        ubar = ControlPath.constant([0.0, 0.0])
        a = integrate_adjoint(sysm, run, u, 0.4, [0.2, 0.1], ubar)
        b = integrate_adjoint(sysm, run, u, 1.2, [0.6, 0.3], ubar)
        assert b.p == pytest.approx(3 * a.p, rel=1e-12, abs=1e-13)
        assert b.q == pytest.approx(3 * a.q, rel=1e-12, abs=1e-13)
        assert a.scaled(3.0).q == pytest.approx(b.q, rel=1e-12, abs=1e-13)

    def test_q_closed_form(self, free_disk):
        sysm, u, run = free_disk
        ubar = ControlPath.constant([0.0, 0.0])
        arc = integrate_adjoint(sysm, run, u, 0.5, [0.2, 0.1], ubar)
        # p = pT, q(t) = lam (u(0) - ubar(0)) - t pT
        expect = 0.5 * np.array([0.1, -0.1]) - run.t[:, None] * np.array([0.2, 0.1])
        assert arc.q == pytest.approx(expect, abs=1e-12)

    def test_slide_log_decay(self, interval_system):
        gamma = 100.0
        u = ControlPath.constant([0.0])
        run = integrate_penalized(interval_system, gamma, [0.0], u)
        arc = integrate_adjoint(interval_system, run, u, 0.0, [1.0], refine=4)
        x = run.x[:, 0]
        # p' = xi (2 + 4 gamma x^2) p
        rate = run.xi * (2.0 + 4.0 * gamma * x**2)
        expected = -np.trapezoid(rate, run.t)
        assert math.log(arc.p[0, 0]) == pytest.approx(expected, rel=1e-3)

    def test_normalized(self, free_disk):
        sysm, u, run = free_disk
        arc = integrate_adjoint(sysm, run, u, 0.3, [0.5, 0.5]).normalized()
        assert abs(arc.normalization - 1.0) <= 1e-12

    def test_csv(self, free_disk):
        sysm, u, run = free_disk
        lines = integrate_adjoint(sysm, run, u, 1.0, [0.0, 0.0]).to_csv().splitlines()
        assert lines[0] == "t,p_1,p_2,q_1,q_2"
        assert len(lines) == len(run.t) + 1


class TestResiduals:
    def test_maximization_lambda_zero(self, free_disk):
        sysm, u, run = free_disk
        pT = np.array([0.3, 0.4])
        arc = integrate_adjoint(sysm, run, u, 0.0, pT, u)
        # cell means of q = -t pT; the last cell has midpoint 0.995
        assert residual_maximization(arc, u, u) == pytest.approx(0.995 * 0.5, abs=1e-10)
        assert np.all(arc.omega_cells == 0.0)

    def test_maximization_zero_adjoint(self, free_disk):
        sysm, u, run = free_disk
        arc = integrate_adjoint(sysm, run, u, 1.0, [0.0, 0.0], u)
        assert residual_maximization(arc, u, u) == 0.0

    def test_transversality(self, free_disk):
        sysm, u, run = free_disk
        arc = integrate_adjoint(sysm, run, u, 1.0, [0.3, 0.4], u)
        C0 = EndpointSet((PointSet(np.zeros(2)),))
        r0, r1 = residual_transversality(EndpointCost("zero"), arc, run, C0, EndpointSet(()), [0.0, 0.0])
        assert r0 == pytest.approx(0.0, abs=1e-12)
        assert r1 == pytest.approx(0.5, abs=1e-12)
        g = EndpointCost("linear", np.zeros(2), np.array([-0.3, -0.4]))
        _, r1 = residual_transversality(g, arc, run, C0, EndpointSet(()), [0.0, 0.0])
        assert r1 == pytest.approx(0.0, abs=1e-12)

    def test_weak_max_positive(self, reach1d):
        u = ControlPath.constant([0.5])
        run = integrate_penalized(reach1d.system, 100.0, [0.0], u)
        arc = integrate_adjoint(reach1d.system, run, u, 0.0, [1.0])
        # sigma_U(p) - 0.5 p = 0.5 p with p ~ 1 away from the wall
        assert weak_max_convexU(reach1d.system, arc, run, u) == pytest.approx(0.5, rel=1e-6)

    def test_slackness_zero_without_contact(self, free_disk):
        sysm, u, run = free_disk
        arc = integrate_adjoint(sysm, run, u, 1.0, [1.0, 1.0])
        assert slackness_integral(sysm, run, arc) <= 1e-30
        assert np.all(np.abs(nu_density(sysm, run, arc)) <= 1e-30)


class TestRegime:
    def test_reject_active(self, reach1d):
        u = ControlPath.constant([1.0])
        with pytest.raises(RegimeViolation):
            regime_check(reach1d.system.U, u, u.grid, "reject")
        run = integrate_penalized(reach1d.system, 100.0, [0.0], u)
        with pytest.raises(RegimeViolation):
            integrate_adjoint(reach1d.system, run, u, 1.0, [1.0], active="reject")

    def test_isolated_node_allowed(self, reach1d):
        u = ControlPath.from_function(lambda t: [t], 11)
        assert regime_check(reach1d.system.U, u, u.grid, "reject") == 1

    def test_reconstruct_counts(self, reach1d):
        u = ControlPath.constant([1.0])
        assert regime_check(reach1d.system.U, u, u.grid) == 101


class TestFit:
    def test_recovers_known_minimizer(self):
        target = np.array([0.3, -0.2])
        fit = fit_multiplier(lambda lam, pT: float(np.sum((pT - target) ** 2)), 2)
        assert fit.pT == pytest.approx(target, abs=1e-6)
        assert fit.lam == pytest.approx(1.0 - np.linalg.norm(target), abs=1e-6)

    def test_one_dimensional(self):
        fit = fit_multiplier(lambda lam, pT: (lam - 0.25) ** 2 + 0.0 * pT[0], 1)
        assert fit.lam == pytest.approx(0.25, abs=1e-8)


class TestCheckCandidate:
    def test_reach1d_passes(self, nc_check):
        report, arc = nc_check
        assert report.passed, report.residuals
        assert report.residuals["slackness"] <= 1e-3
        assert abs(arc.normalization - 1.0) <= 1e-12
        assert report.multiplier["active_control_nodes"] > 1

    def test_report_json(self, nc_check):
        report, _ = nc_check
        d = json.loads(report.to_json())
        assert d["verdict"] == "PASS"
        assert set(d["verdicts"]) == set(d["residuals"])

    def test_discrete_adjoint_first_order(self, reach1d):
        # implicit-Euler discrete adjoint vs continuous p on the same control: gap O(h)
        r = solve_Pk(reach1d.problem, reach1d.system, 100.0, mode="nc")
        gaps = []
        for n_sub in (80, 320, 1280):
            tr = Transcription(reach1d.system, 100.0, reach1d.problem.g, r.C0k, r.C1k, r.x0_center, r.u_center,
                               r.weight, r.n_nodes, n_sub)
            t, A = tr.discrete_adjoint(r.z)
            run = tr.run(r.z)
            arc = integrate_adjoint(reach1d.system, run, tr.control(r.z), 1.0, -A[-1])
            assert np.array_equal(t, run.t)
            gaps.append(float(np.max(np.abs(arc.p + A))))
        assert 3.5 <= gaps[0] / gaps[1] <= 4.5
        assert 3.5 <= gaps[1] / gaps[2] <= 4.5
        assert gaps[-1] <= 1e-3

    def test_stiff_layer_no_sign_flip(self, reach1d_nc, reach1d):
        r = reach1d_nc
        arcs = [integrate_adjoint(reach1d.system, r.run, r.control, 1.0, [1.0], refine=k) for k in (1, 8)]
        assert np.all(arcs[0].p > 0)
        assert np.max(np.abs(arcs[0].p - arcs[1].p)) <= 1e-3


class TestLimit:
    def test_divergence_warning(self, free_disk):
        sysm, u, run = free_disk
        arcs = [integrate_adjoint(sysm, run, u, 1.0, [0.0, 0.0]) for _ in range(3)]
        arcs = [a.__class__(**{**a.__dict__, "p": a.p + np.sin(k * 40 * run.t)[:, None] * (k + 1)})
                for k, a in enumerate(arcs)]
        with pytest.warns(DivergenceWarning):
            limit_residuals(sysm, [(run, a) for a in arcs])

    def test_quiet_when_flat(self, free_disk):
        sysm, u, run = free_disk
        arc = integrate_adjoint(sysm, run, u, 1.0, [0.1, 0.0])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = limit_residuals(sysm, [(run, arc)] * 3)
        assert res["nu_off_ratio"] == 0.0
        assert res["p_tv"] == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)
