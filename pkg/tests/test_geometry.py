import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweeper import geometry as geo
from sweeper.geometry import (CertificationError, DegenerateGradientError, PenaltySchedule, PreconditionError,
                              ScheduleDomainError, alpha_of_gamma, certify_constants, in_C, in_Ck, inward_start,
                              prox_radius, shift_inward, shift_rank)


def squircle(eta, scale=1.0):
    """x^4 + y^4 <= scale^4, used as a custom-shape factory."""
    return geo.custom(lambda x: float(np.sum(x**4) - scale**4), lambda x: 4.0 * x**3,
                      lambda x: np.diag(12.0 * x**2), ([-1.2 * scale] * 2, [1.2 * scale] * 2), [0.0, 0.0], eta)


class TestAlpha:
    def test_closed_form(self):
        assert alpha_of_gamma(100.0, 0.5, 1.0) == pytest.approx(math.log(25.0) / 100.0, rel=1e-15)
        assert alpha_of_gamma(100.0, 0.5, 1.0) == pytest.approx(0.0321888, abs=1e-7)

    def test_identity(self):
        a = alpha_of_gamma(100.0, 0.5, 1.0)
        assert abs(100.0 * math.exp(-a * 100.0) - 4.0) / 4.0 <= 1e-12

    @pytest.mark.parametrize("gamma", [4.0, 3.0, 0.5])
    def test_domain(self, gamma):
        with pytest.raises(ScheduleDomainError):
            alpha_of_gamma(gamma, 0.5, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1.0001, 1e6), st.floats(0.01, 2.0), st.floats(0.01, 10.0))
    def test_identity_property(self, ratio, eta, Mbar):
        gamma = ratio * 2 * Mbar / eta
        a = alpha_of_gamma(gamma, eta, Mbar)
        target = 2 * Mbar / eta
        assert a > 0
        assert abs(gamma * math.exp(-a * gamma) - target) / target <= 1e-12


class TestSchedule:
    def test_derived_lists(self):
        s = PenaltySchedule((10.0, 100.0, 1000.0), 1.0, 0.5)
        assert np.all(np.diff(s.alphas) < 0)
        assert s.rhos == pytest.approx([a / 0.5 for a in s.alphas])
        assert np.all(s.identity_residuals() <= 1e-12)

    def test_geometric_default(self):
        s = PenaltySchedule.geometric(2.0, 0.9, n=5)
        assert s.gammas[0] == pytest.approx(4 * 2.0 / 0.9)
        assert s.gammas[1] / s.gammas[0] == pytest.approx(2.0)

    def test_rejects_non_ascending(self):
        with pytest.raises(ValueError):
            PenaltySchedule((100.0, 10.0), 1.0, 0.5)

    def test_rejects_small_gamma(self):
        with pytest.raises(ScheduleDomainError):
            PenaltySchedule((4.0, 100.0), 1.0, 0.5)


class TestMembership:
    def test_ball_Ck_radius(self):
        S = geo.ball([0.0, 0.0], 1.0, eta=0.9)
        r = math.sqrt(0.9)
        assert in_Ck(S, 0.1, [r - 1e-9, 0.0])
        assert not in_Ck(S, 0.1, [r + 1e-9, 0.0])

    def test_boundary_point(self):
        S = geo.ball([0.0, 0.0], 1.0, eta=0.9)
        assert in_C(S, [0.0, 1.0])
        assert not in_Ck(S, 1e-12, [0.0, 1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2), st.floats(1e-4, 0.5))
    def test_nesting(self, x, y, alpha):
        S = geo.ellipse([0.0, 0.0], [1.0, 0.8], eta=0.3)
        if in_Ck(S, alpha, [x, y]):
            assert in_C(S, [x, y])


class TestShift:
    def test_interval(self):
        S = geo.interval(-1.0, 1.0, eta=0.9)
        c = shift_inward(S, [1.0], 0.05)
        assert c == pytest.approx([0.95])
        assert S.psi(c) == pytest.approx(-0.0975)

    def test_ball(self):
        S = geo.ball([0.0, 0.0], 1.0, eta=0.9)
        assert shift_inward(S, [1.0, 0.0], 0.1) == pytest.approx([0.9, 0.0])

    def test_interior_rejected(self):
        S = geo.interval(-1.0, 1.0, eta=0.9)
        with pytest.raises(PreconditionError):
            shift_inward(S, [0.5], 0.05)
        assert inward_start(S, [0.5], 0.05) == pytest.approx([0.5])

    def test_degenerate_gradient(self):
        S = geo.custom(lambda x: float(x[0] ** 3), lambda x: np.array([3 * x[0] ** 2]),
                       lambda x: np.array([[6 * x[0]]]), ([-1.0], [1.0]), [0.0], eta=0.1,
                       Mbar_psi=3.0, M_psi=3.0)
        with pytest.raises(DegenerateGradientError):
            shift_inward(S, [0.0], 0.01)

    def test_rank_detected(self):
        S = geo.ellipse([0.0, 0.0], [2.0, 1.0], eta=0.45)
        sched = PenaltySchedule((10.0, 100.0, 1000.0, 10000.0), 1.5621, 0.45)
        k = shift_rank(S, sched, geo.boundary_points(S, 64))
        assert k is not None
        for kk in range(k, len(sched)):
            for c in geo.boundary_points(S, 64):
                assert S.psi(shift_inward(S, c, sched.rhos[kk])) < -sched.alphas[kk]


class TestConstants:
    def test_prox_radius(self):
        S = geo.ball([0.0], 1.0, eta=0.9)
        assert prox_radius(S) == pytest.approx(0.9)
        assert S.M_psi >= 4 * S.eta / S.rho * (1 - 1e-12)

    def test_ball_certifies(self):
        rep = certify_constants(geo.ball([0.0, 0.0], 1.0, eta=0.9))
        assert rep.passed
        assert rep.min_boundary_grad == pytest.approx(2.0, abs=1e-8)

    def test_ball_eta_too_large(self):
        with pytest.raises(CertificationError) as err:
            certify_constants(geo.ball([0.0, 0.0], 1.0, eta=1.1))
        assert np.linalg.norm(err.value.witness) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("eta, ok", [(0.45, True), (0.49, True), (0.5, False), (0.55, False)])
    def test_ellipse_floor(self, eta, ok):
        rep = certify_constants(geo.ellipse([0.0, 0.0], [2.0, 1.0], eta=eta), raise_on_fail=False)
        assert rep.passed is ok
        assert rep.min_boundary_grad == pytest.approx(1.0, abs=1e-8)

    def test_custom_estimates(self):
        S = geo.custom(lambda x: float(x @ x - 1.0), lambda x: 2.0 * x, lambda x: 2.0 * np.eye(2),
                       ([-1.2, -1.2], [1.2, 1.2]), [0.0, 0.0], eta=0.9)
        assert S.Mbar_psi == pytest.approx(2.0 * 1.05, rel=2e-2)
        assert S.M_psi == pytest.approx(1.05)
        assert certify_constants(S).passed


class TestBatch:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
    def test_matches_pointwise(self, vals):
        S = geo.ellipse([0.5, -0.2], [2.0, 1.0], eta=0.45)
        X = np.array(vals).reshape(3, 2)
        assert geo.psi_batch(S, X) == pytest.approx([S.psi(x) for x in X], abs=1e-12)
        assert geo.grad_psi_batch(S, X) == pytest.approx(np.array([S.grad_psi(x) for x in X]), abs=1e-12)


class TestSpec:
    @pytest.mark.parametrize("S", [geo.interval(-1.0, 2.0, eta=1.0), geo.ball([0.0, 1.0], 2.0, eta=1.5),
                                   geo.ellipse([0.0, 0.0], [2.0, 1.0], eta=0.45)])
    def test_roundtrip(self, S):
        T = geo.from_spec(geo.to_spec(S))
        assert geo.to_spec(T) == geo.to_spec(S)
        x = np.full(S.dim, 0.3)
        assert T.psi(x) == S.psi(x)

    def test_custom_factory_roundtrip(self):
        spec = {"shape_tag": "custom", "factory": "test_geometry:squircle", "args": {"scale": 1.0}, "eta": 0.3}
        S = geo.from_spec(spec)
        assert S.shape_tag == "custom"
        assert geo.to_spec(S) == spec
        assert S.psi(np.array([1.0, 0.0])) == pytest.approx(0.0)

    def test_missing_eta(self):
        with pytest.raises(KeyError, match="eta"):
            geo.from_spec({"shape_tag": "ball"})
