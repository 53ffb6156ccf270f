import numpy as np
import pytest

from sweeper import geometry as geo
from sweeper.dynamics import integrate_penalized
from sweeper.geometry import PenaltySchedule, PreconditionError
from sweeper.model import ControlPath
from sweeper.ocp import (BallSet, BoxSet, EmptySetError, EndpointCost, EndpointSet, MayerProblem, PointSet,
                         ReferencePair, StatePart, Transcription, brute_force_grid, build_C0k, build_C1k,
                         evaluate_J, solve_Pk, transcription_from_bundle)


@pytest.fixture(scope="module")
def interval():
    return geo.interval(-1.0, 1.0, eta=0.9)


def fd_check(tr, z, n_coords=20, seed=0, eps=1e-6):
    rng = np.random.default_rng(seed)
    _, g = tr.value_and_grad(z)
    worst = 0.0
    for i in rng.choice(tr.size, size=min(n_coords, tr.size), replace=False):
        e = np.zeros(tr.size)
        e[i] = eps
        fd = (tr.value(z + e) - tr.value(z - e)) / (2 * eps)
        worst = max(worst, abs(fd - g[i]) / max(abs(g[i]), abs(fd), 1e-3))
    return worst


class TestEndpointSets:
    def test_point_simplifies(self):
        E = EndpointSet((PointSet(np.array([0.2])), BoxSet(np.array([-1.0]), np.array([1.0]))))
        assert E.singleton() == pytest.approx([0.2])

    def test_empty(self):
        with pytest.raises(EmptySetError):
            EndpointSet((PointSet(np.array([2.0])), BoxSet(np.array([-1.0]), np.array([1.0]))))
        with pytest.raises(EmptySetError):
            EndpointSet((BoxSet(np.array([0.0]), np.array([1.0])), BoxSet(np.array([2.0]), np.array([3.0]))))

    def test_ball_state_intersection(self):
        S = geo.ball([0.0, 0.0], 1.0, eta=0.9)
        E = EndpointSet((BallSet(np.array([1.0, 0.0]), 0.5), StatePart(S)))
        p = E.project(np.array([2.0, 0.0]))
        assert p == pytest.approx([1.0, 0.0], abs=1e-8)
        assert E.contains(p)

    def test_normal_cone_nnls(self):
        E = EndpointSet((BoxSet(np.array([0.0, 0.0]), np.array([1.0, 1.0])),))
        corner = np.array([1.0, 1.0])
        assert E.normal_cone_distance(corner, np.array([2.0, 3.0])) == pytest.approx(0.0, abs=1e-12)
        assert E.normal_cone_distance(corner, np.array([-1.0, 0.0])) == pytest.approx(1.0)
        assert E.normal_cone_distance(np.array([0.5, 0.5]), np.array([0.3, 0.4])) == pytest.approx(0.5)

    def test_penalty_gradient(self):
        E = EndpointSet((BallSet(np.array([0.0, 0.0]), 1.0),))
        v, g = E.penalty(np.array([2.0, 0.0]))
        assert v == pytest.approx(1.0)
        assert g == pytest.approx([2.0, 0.0])

    def test_spec_roundtrip(self, interval):
        E = EndpointSet.from_spec([{"kind": "ball", "center": [0.0, 0.0], "radius": 1.0}, {"kind": "state"}], 2,
                                  geo.ball([0.0, 0.0], 1.0, eta=0.9))
        assert E.to_spec() == [{"kind": "ball", "center": [0.0, 0.0], "radius": 1.0}, {"kind": "state"}]


class TestBuildSets:
    def test_C0k_boundary_shift(self, interval):
        prob = MayerProblem(EndpointCost("zero"), EndpointSet((PointSet(np.array([1.0])),)), EndpointSet(()),
                            0.5, ReferencePair(np.array([1.0]), ControlPath.constant([0.0])))
        sched = PenaltySchedule((100.0, 1000.0), 1.0, 0.9)
        C0k = build_C0k(prob, interval, sched, 0)
        assert C0k.singleton() == pytest.approx([1.0 - sched.rhos[0]])
        assert interval.psi(C0k.singleton()) < -sched.alphas[0]

    def test_C0k_interior_untouched(self, interval):
        prob = MayerProblem(EndpointCost("zero"), EndpointSet((PointSet(np.array([0.95])),)), EndpointSet(()),
                            0.5, ReferencePair(np.array([0.95]), ControlPath.constant([0.0])))
        sched = PenaltySchedule((100.0,), 1.0, 0.9)
        assert build_C0k(prob, interval, sched, 0).singleton() == pytest.approx([0.95])

    def test_C0k_needs_reference(self, interval):
        prob = MayerProblem(EndpointCost("zero"), EndpointSet(()), EndpointSet(()))
        with pytest.raises(PreconditionError):
            build_C0k(prob, interval, PenaltySchedule((100.0,), 1.0, 0.9), 0)

    def test_C1k_translate(self, interval):
        prob = MayerProblem(EndpointCost("zero"), EndpointSet(()),
                            EndpointSet((BoxSet(np.array([0.9]), np.array([1.0])),)), 0.5)
        C1k = build_C1k(prob, interval, [1.0], [0.98])
        (box,) = C1k.parts
        assert box.lo == pytest.approx([0.88])
        assert box.hi == pytest.approx([0.98])

    def test_C1k_clipped_by_C(self, interval):
        prob = MayerProblem(EndpointCost("zero"), EndpointSet(()),
                            EndpointSet((BoxSet(np.array([0.9]), np.array([1.1])),)), 0.5)
        (box,) = build_C1k(prob, interval, [1.0], [0.98]).parts
        assert box.lo == pytest.approx([0.88]) and box.hi == pytest.approx([1.0])


class TestEvaluateJ:
    def test_reference_cost(self, reach1d):
        prob = reach1d.problem
        run = integrate_penalized(reach1d.system, 100.0, [0.0], prob.reference.u)
        assert evaluate_J(prob, run, prob.reference.u, prob.reference) == pytest.approx(-run.x[-1, 0], abs=1e-15)

    def test_prox_terms(self, reach1d):
        prob = reach1d.problem
        u = ControlPath.from_function(lambda t: [1.0 - 0.2 * t], 11)
        run = integrate_penalized(reach1d.system, 100.0, [0.0], u)
        # d(t) = -0.2 t: d(0) = 0, ||d'||^2 = 0.04
        assert evaluate_J(prob, run, u, prob.reference) == pytest.approx(-run.x[-1, 0] + 0.02, abs=1e-14)


class TestTranscription:
    @pytest.mark.parametrize("gamma", [100.0, 1e4])
    def test_gradient_reach1d(self, reach1d, gamma):
        prob = reach1d.problem
        C1 = prob.C1.intersect(StatePart(reach1d.set))
        tr = Transcription(reach1d.system, gamma, prob.g, prob.C0, C1, [0.0], prob.reference.u, 10.0, 51, 10)
        u = ControlPath.from_function(lambda t: [0.5 * np.cos(4 * t)], 51)
        assert fd_check(tr, tr.initial([0.0], u)) <= 1e-5

    @pytest.mark.parametrize("gamma", [100.0, 1e3])
    def test_gradient_disk_push(self, disk_push, gamma):
        prob = disk_push.problem
        S = disk_push.set
        C0 = EndpointSet((BallSet(np.zeros(2), 0.3), StatePart(S)))
        C1 = EndpointSet((BallSet(np.array([0.5, 0.0]), 0.2),))
        tr = Transcription(disk_push.system, gamma, prob.g, C0, C1, [0.1, 0.0], ControlPath.constant([0.0, 0.0]),
                           100.0, 41, 10)
        u = ControlPath.from_function(lambda t: [0.6 * np.cos(3 * t), 0.6 * np.sin(3 * t)], 41)
        z = tr.initial([0.1, -0.05], u)
        assert tr.nx0 == 2
        assert fd_check(tr, z) <= 1e-5

    def test_compiled_matches_python(self, disk_push):
        prob = disk_push.problem
        args = (disk_push.system, 1e3, prob.g, prob.C0, EndpointSet(()), [0.0, 0.0],
                ControlPath.constant([0.0, 0.0]), 0.0, 21, 10)
        a, b = Transcription(*args), Transcription(*args, compiled=False)
        z = a.initial([0.0, 0.0], ControlPath.constant([0.9, 0.1]))
        assert a.forward(z)[0] == pytest.approx(b.forward(z)[0], abs=1e-12)
        assert a.value_and_grad(z)[1] == pytest.approx(b.value_and_grad(z)[1], abs=1e-10)


class TestSolve:
    def test_reach1d_nc(self, reach1d_nc):
        r = reach1d_nc
        assert r.kkt["converged"]
        assert r.J <= -0.99
        assert r.kkt["controls_admissible"]
        assert r.kkt["max_psi"] <= 0.0
        assert r.kkt["endpoint_violation"] <= 1e-6

    def test_zero_cost_returns_reference(self, reach1d):
        prob = MayerProblem(EndpointCost("zero"), reach1d.problem.C0, reach1d.problem.C1, reach1d.problem.delta,
                            reach1d.problem.reference)
        r = solve_Pk(prob, reach1d.system, 1e3, mode="nc")
        assert r.J == pytest.approx(0.0, abs=1e-12)
        assert r.control.nodes == pytest.approx(np.ones((101, 1)))

    def test_warm_start_consistent(self, reach1d, reach1d_nc):
        r = solve_Pk(reach1d.problem, reach1d.system, 1e4, init=reach1d_nc.control, mode="nc")
        assert r.J == pytest.approx(reach1d_nc.J, abs=1e-8)

    def test_bundle_roundtrip(self, reach1d, reach1d_nc):
        import json

        b = json.loads(reach1d_nc.bundle_json("reach1d"))
        tr, z = transcription_from_bundle(reach1d.system, reach1d.problem, b)
        assert tr.value(z) == pytest.approx(reach1d_nc.J + 0.5 * b["weight"] * tr.C1set.penalty(
            tr.forward(z)[0][-1])[0], abs=1e-12)

    def test_nc_needs_reference(self, disk_push):
        with pytest.raises(PreconditionError):
            solve_Pk(disk_push.problem, disk_push.system, 100.0, mode="nc")

    def test_trace_csv(self, reach1d_nc):
        lines = reach1d_nc.trace_csv().splitlines()
        assert lines[0] == "round,weight,iteration,J,pg_norm,step"
        assert len(lines) == len(reach1d_nc.trace) + 1


class TestBruteForce:
    def test_disk_push(self, disk_push):
        bf = brute_force_grid(disk_push.problem, disk_push.system, disk_push.x0, n_nodes=3)
        assert bf.cost == pytest.approx(1.0, abs=1e-9)
        assert bf.n_candidates == 5**3

    def test_reach1d(self, reach1d):
        bf = brute_force_grid(reach1d.problem, reach1d.system, reach1d.x0, n_nodes=4)
        assert bf.cost == pytest.approx(-1.0, abs=1e-9)
        assert np.all(bf.nodes == 1.0)
