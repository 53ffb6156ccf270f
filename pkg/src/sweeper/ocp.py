"""Direct transcription of the approximating Mayer problems and their continuation in gamma.

The decision vector is the initial state (when it is not pinned) followed by
the control nodes. States are propagated by fixed-step implicit Euler with
piecewise-linear controls sampled at step ends; the gradient comes from the
reverse sweep through the step sensitivities, so it is exact for the discrete
objective. Implicit Euler is L-stable, which keeps the discrete terminal state
monotone in the control near the stiff boundary layer.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.optimize import nnls

from . import kernels
from .dynamics import (InvarianceViolation, PenalizedField, PenaltyRun, StepControl, StepFailure,
                       _assemble_run)
from .geometry import PenaltySchedule, PreconditionError, SublevelSet, psi_batch, shift_inward
from .model import Ball, Box, ControlPath, System, _vec
from .optim import LineSearchFailure, MaxIterations, ProductConstraint, Block, projected_lbfgs
from .oracle import catching_up, catching_up_batch, project as project_C

MEMBER_TOL = 1e-9
WEIGHTS = tuple(10.0**e for e in range(1, 7))


class EmptySetError(ValueError):
    pass


class InfeasibleEndpoint(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


# -- endpoint sets ----------------------------------------------------------

def _eye_cone(n):
    I = np.eye(n)
    return np.hstack([I, -I])


@dataclass(frozen=True)
class PointSet:
    p: np.ndarray
    kind = "point"

    def project(self, x):
        return self.p.copy()

    def contains(self, x, tol=MEMBER_TOL):
        return float(np.linalg.norm(x - self.p)) <= tol

    def normal_generators(self, x, tol=MEMBER_TOL):
        return _eye_cone(len(self.p))

    def translate(self, v):
        return PointSet(self.p + v)

    def to_spec(self):
        return {"kind": "point", "value": self.p.tolist()}


@dataclass(frozen=True)
class BoxSet:
    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def project(self, x):
        return np.clip(x, self.lo, self.hi)

    def contains(self, x, tol=MEMBER_TOL):
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def normal_generators(self, x, tol=MEMBER_TOL):
        return Box(self.lo, self.hi).normal_generators(x, tol)

    def translate(self, v):
        return BoxSet(self.lo + v, self.hi + v)

    def to_spec(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class BallSet:
    center: np.ndarray
    radius: float
    kind = "ball"

    def project(self, x):
        return Ball(self.center, self.radius).project(x)

    def contains(self, x, tol=MEMBER_TOL):
        return float(np.linalg.norm(x - self.center)) <= self.radius + tol

    def normal_generators(self, x, tol=MEMBER_TOL):
        return Ball(self.center, self.radius).normal_generators(x, tol)

    def translate(self, v):
        return BallSet(self.center + v, self.radius)

    def to_spec(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class StatePart:
    """The state constraint set C itself."""

    S: SublevelSet
    kind = "state"

    def project(self, x):
        return project_C(self.S, x)

    def contains(self, x, tol=MEMBER_TOL):
        return self.S.psi(x) <= tol

    def normal_generators(self, x, tol=MEMBER_TOL):
        if abs(self.S.psi(x)) > tol:
            return np.zeros((len(x), 0))
        g = self.S.grad_psi(x)
        return (g / np.linalg.norm(g))[:, None]

    def translate(self, v):
        raise TypeError("the state constraint set is never translated")

    def to_spec(self):
        return {"kind": "state"}


def primitive_from_spec(spec: dict, n: int, S: Optional[SublevelSet] = None):
    kind = spec["kind"]
    if kind == "point":
        return PointSet(_vec(spec["value"], n))
    if kind == "box":
        return BoxSet(_vec(spec["lo"], n), _vec(spec["hi"], n))
    if kind == "ball":
        return BallSet(_vec(spec["center"], n), float(spec["radius"]))
    if kind == "state":
        if S is None:
            raise ValueError("state part needs the set C")
        return StatePart(S)
    raise ValueError(f"unsupported endpoint primitive {kind!r}")


def _as_box_1d(p):
    if isinstance(p, BallSet) and len(p.center) == 1:
        return BoxSet(p.center - p.radius, p.center + p.radius)
    if isinstance(p, StatePart) and p.S.dim == 1 and p.S.shape_tag in ("interval", "ball"):
        c, r = p.S.params["center"][0], p.S.params["radius"]
        return BoxSet(np.array([c - r]), np.array([c + r]))
    return p


def _simplify(parts):
    parts = [_as_box_1d(p) for p in parts]
    points = [p for p in parts if isinstance(p, PointSet)]
    if points:
        pt = points[0]
        for q in parts:
            if not q.contains(pt.p):
                raise EmptySetError(f"point {pt.p} is not in {q.to_spec()}")
        return (pt,)
    boxes = [p for p in parts if isinstance(p, BoxSet)]
    rest = [p for p in parts if not isinstance(p, BoxSet)]
    if boxes:
        lo = np.max([b.lo for b in boxes], axis=0)
        hi = np.min([b.hi for b in boxes], axis=0)
        if np.any(lo > hi + MEMBER_TOL):
            raise EmptySetError("empty box intersection")
        rest = [BoxSet(lo, np.maximum(hi, lo))] + rest
    return tuple(rest)


@dataclass(frozen=True)
class EndpointSet:
    """Intersection of point, box, ball and state primitives (no parts = whole space)."""

    parts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "parts", _simplify(self.parts))

    def intersect(self, *others) -> "EndpointSet":
        return EndpointSet(self.parts + tuple(others))

    def translate(self, v) -> "EndpointSet":
        return EndpointSet(tuple(p.translate(v) for p in self.parts))

    def singleton(self):
        if len(self.parts) == 1 and isinstance(self.parts[0], PointSet):
            return self.parts[0].p
        return None

    def project(self, x):
        """Dykstra's alternating projections (exact for a single primitive)."""
        x = np.asarray(x, dtype=float)
        if not self.parts:
            return x.copy()
        if len(self.parts) == 1:
            return self.parts[0].project(x)
        y = x.copy()
        incs = [np.zeros_like(x) for _ in self.parts]
        for _ in range(5000):
            y_old = y
            for i, P in enumerate(self.parts):
                tmp = y + incs[i]
                y = P.project(tmp)
                incs[i] = tmp - y
            if float(np.linalg.norm(y - y_old)) <= 1e-15 * (1.0 + float(np.linalg.norm(y))):
                break
        return y

    def contains(self, x, tol=MEMBER_TOL) -> bool:
        return all(p.contains(x, tol) for p in self.parts)

    def distance(self, x) -> float:
        return float(np.linalg.norm(x - self.project(x)))

    def penalty(self, x):
        """sum_i dist(x, part_i)^2 and its gradient."""
        val = 0.0
        grad = np.zeros_like(x)
        for p in self.parts:
            r = x - p.project(x)
            val += float(r @ r)
            grad += 2.0 * r
        return val, grad

    def normal_generators(self, x, tol=MEMBER_TOL) -> np.ndarray:
        cols = [p.normal_generators(x, tol) for p in self.parts]
        cols = [c for c in cols if c.shape[1]]
        return np.hstack(cols) if cols else np.zeros((len(x), 0))

    def normal_cone_distance(self, x, v, tol=1e-7) -> float:
        """Distance from v to the normal cone at x (sum of the primitive cones)."""
        v = np.asarray(v, dtype=float)
        G = self.normal_generators(x, tol)
        if G.shape[1] == 0:
            return float(np.linalg.norm(v))
        _, res = nnls(G, v)
        return float(res)

    def check_nonempty(self, seed) -> np.ndarray:
        y = self.project(np.asarray(seed, dtype=float))
        if not self.contains(y, 1e-8):
            raise EmptySetError(f"endpoint set {self.to_spec()} appears empty")
        return y

    def to_spec(self) -> list:
        return [p.to_spec() for p in self.parts]

    @classmethod
    def from_spec(cls, spec, n: int, S: Optional[SublevelSet] = None) -> "EndpointSet":
        if spec is None:
            return cls(())
        if isinstance(spec, dict):
            spec = [spec]
        return cls(tuple(primitive_from_spec(s, n, S) for s in spec))


# -- problem data -----------------------------------------------------------

@dataclass(frozen=True)
class EndpointCost:
    """g(x0, x1): 'zero', 'linear' (a0.x0 + a1.x1) or 'target' (weight ||x1 - target||^2)."""

    kind: str
    a0: Optional[np.ndarray] = None
    a1: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    weight: float = 1.0

    def value(self, x0, x1) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "linear":
            return float(self.a0 @ x0 + self.a1 @ x1)
        d = x1 - self.target
        return self.weight * float(d @ d)

    def grad(self, x0, x1):
        z = np.zeros_like(x0)
        if self.kind == "zero":
            return z, np.zeros_like(x1)
        if self.kind == "linear":
            return self.a0.copy(), self.a1.copy()
        return z, 2.0 * self.weight * (x1 - self.target)

    @classmethod
    def from_spec(cls, spec: dict, n: int) -> "EndpointCost":
        kind = spec.get("kind", "zero")
        if kind == "zero":
            return cls("zero")
        if kind == "linear":
            return cls("linear", _vec(spec.get("a0", [0.0] * n), n), _vec(spec.get("a1", [0.0] * n), n))
        if kind == "target":
            return cls("target", target=_vec(spec["target"], n), weight=float(spec.get("weight", 1.0)))
        raise ValueError(f"unknown cost kind {kind!r}")

    def to_spec(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "linear":
            return {"kind": "linear", "a0": self.a0.tolist(), "a1": self.a1.tolist()}
        return {"kind": "target", "target": self.target.tolist(), "weight": self.weight}


@dataclass(frozen=True)
class ReferencePair:
    x0: np.ndarray
    u: ControlPath


@dataclass(frozen=True)
class MayerProblem:
    """Mayer cost, endpoint sets and tube radius; U lives on the System."""

    g: EndpointCost
    C0: EndpointSet
    C1: EndpointSet
    delta: float = 1.0
    reference: Optional[ReferencePair] = None
    delta_o: Optional[float] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def radius_o(self) -> float:
        return self.delta if self.delta_o is None else self.delta_o

    @classmethod
    def from_spec(cls, spec: dict, system: System) -> "MayerProblem":
        n, m = system.n, system.m
        ref = None
        if "reference" in spec:
            r = spec["reference"]
            ref = ReferencePair(_vec(r["x0"], n), ControlPath.from_spec(r["control"], m))
        prob = cls(EndpointCost.from_spec(spec.get("g", {"kind": "zero"}), n),
                   EndpointSet.from_spec(spec.get("C0"), n), EndpointSet.from_spec(spec.get("C1"), n),
                   float(spec.get("delta", 1.0)), ref,
                   None if spec.get("delta_o") is None else float(spec["delta_o"]))
        S = system.set
        if any(S.psi(pt) > S.boundary_tol for pt in _samples(prob.C0)):
            raise ValueError("C0 must lie in C")
        return prob

    def to_spec(self) -> dict:
        d = {"g": self.g.to_spec(), "C0": self.C0.to_spec(), "C1": self.C1.to_spec(), "delta": self.delta}
        if self.delta_o is not None:
            d["delta_o"] = self.delta_o
        if self.reference is not None:
            d["reference"] = {"x0": self.reference.x0.tolist(), "control": self.reference.u.to_spec()}
        return d


def _samples(E: EndpointSet):
    """A few representative points of an endpoint set (vertices, centers)."""
    pts = []
    for p in E.parts:
        if isinstance(p, PointSet):
            pts.append(p.p)
        elif isinstance(p, BoxSet):
            for corner in itertools.product(*zip(p.lo, p.hi)):
                pts.append(E.project(np.array(corner)))
        elif isinstance(p, BallSet):
            pts.append(E.project(p.center))
    return pts


# -- endpoint sets of the approximating problems ------------------------------

def build_C0k(problem: MayerProblem, S: SublevelSet, schedule: PenaltySchedule, k: int,
              delta_o: Optional[float] = None) -> EndpointSet:
    """C0 near xbar(0); shifted inward by rho_k when xbar(0) is on the boundary."""
    if problem.reference is None:
        raise PreconditionError("build_C0k needs a reference xbar(0)")
    d_o = problem.radius_o if delta_o is None else delta_o
    xb0 = problem.reference.x0
    base = problem.C0.intersect(BallSet(xb0, d_o))
    if S.psi(xb0) < -S.boundary_tol:
        base.check_nonempty(xb0)
        return base
    rho, alpha = schedule.rhos[k], schedule.alphas[k]
    shifted_ref = shift_inward(S, xb0, rho)
    out = base.translate(shifted_ref - xb0)
    pt = out.check_nonempty(shifted_ref)
    if not S.psi(pt) < -alpha:
        raise PreconditionError(f"shifted start is not inside C(k) for k={k}; k is below the detected rank")
    return out


def build_C1k(problem: MayerProblem, S: SublevelSet, xbar1, xbar_gk1, delta_o: Optional[float] = None) -> EndpointSet:
    """[(C1 near xbar(1)) - xbar(1) + xbar_gamma(1)] intersected with C."""
    d_o = problem.radius_o if delta_o is None else delta_o
    xbar1 = np.asarray(xbar1, dtype=float)
    xbar_gk1 = np.asarray(xbar_gk1, dtype=float)
    out = problem.C1.intersect(BallSet(xbar1, d_o)).translate(xbar_gk1 - xbar1).intersect(StatePart(S))
    out.check_nonempty(xbar_gk1)
    return out


def evaluate_J(problem: MayerProblem, run: PenaltyRun, u: ControlPath, reference: ReferencePair) -> float:
    """g(x(0), x(1)) + (||u(0)-ubar(0)||^2 + ||u' - ubar'||_2^2 + ||x(0)-xbar(0)||^2) / 2, exact for
    piecewise-linear controls."""
    x0, x1 = run.x[0], run.x[-1]
    grid = np.union1d(u.grid, reference.u.grid)
    d = u.sample(grid) - reference.u.sample(grid)
    h = np.diff(grid)
    z1 = float(np.sum(np.diff(d, axis=0) ** 2 / h[:, None]))
    prox = float(d[0] @ d[0]) + z1 + float((x0 - reference.x0) @ (x0 - reference.x0))
    return problem.g.value(x0, x1) + 0.5 * prox


# -- transcription ------------------------------------------------------------

class _ControlNodeSet:
    def __init__(self, U):
        self.U = U

    def project(self, v):
        return self.U.project(v)

    def normal_generators(self, v, tol=1e-12):
        return self.U.normal_generators(v, tol)


class Transcription:
    """Objective, gradient, projection and state recovery for one gamma."""

    def __init__(self, system: System, gamma: float, g: EndpointCost, C0set: EndpointSet, C1set: EndpointSet,
                 x0_center, u_center: ControlPath, weight: float = 0.0, n_nodes: int = 101, n_sub: int = 20,
                 compiled: bool = True, newton_tol: float = 1e-13, newton_maxiter: int = 40):
        self.system, self.gamma, self.g = system, float(gamma), g
        self.C0set, self.C1set = C0set, C1set
        self.weight = float(weight)
        self.n, self.m = system.n, system.m
        self.n_nodes, self.n_sub = int(n_nodes), int(n_sub)
        self.grid = np.linspace(0.0, 1.0, self.n_nodes)
        self.dt = 1.0 / (self.n_nodes - 1)
        self.N = (self.n_nodes - 1) * self.n_sub
        self.h = 1.0 / self.N
        self.t = np.linspace(0.0, 1.0, self.N + 1)
        self.idx = np.repeat(np.arange(self.n_nodes - 1), self.n_sub)
        self.theta = np.tile((np.arange(self.n_sub) + 1.0) / self.n_sub, self.n_nodes - 1)
        self.x0_center = np.atleast_1d(np.asarray(x0_center, dtype=float))
        self.u_center = u_center.sample(self.grid)
        self.fixed_x0 = C0set.singleton()
        self.nx0 = 0 if self.fixed_x0 is not None else self.n
        self.size = self.nx0 + self.n_nodes * self.m
        self.fast = system.fast_params() if compiled else None
        self.newton_tol, self.newton_maxiter = newton_tol, newton_maxiter
        blocks = []
        if self.nx0:
            blocks.append(Block(0, self.n, C0set))
        for i, t in enumerate(self.grid):
            s = self.nx0 + i * self.m
            blocks.append(Block(s, s + self.m, _ControlNodeSet(system.U.at(t))))
        self.constraint = ProductConstraint(blocks, self.size)

    # layout
    def split(self, z):
        z = np.asarray(z, dtype=float)
        x0 = self.fixed_x0.copy() if self.fixed_x0 is not None else z[:self.n].copy()
        return x0, z[self.nx0:].reshape(self.n_nodes, self.m)

    def join(self, x0, nodes):
        nodes = np.asarray(nodes, dtype=float).reshape(self.n_nodes, self.m)
        head = [] if self.nx0 == 0 else [np.asarray(x0, dtype=float)]
        return np.concatenate(head + [nodes.ravel()])

    def initial(self, x0, u: ControlPath):
        return self.constraint.project(self.join(self.C0set.project(np.atleast_1d(x0)), u.sample(self.grid)))

    def control(self, z) -> ControlPath:
        return ControlPath(self.grid, self.split(z)[1].copy())

    def u_steps(self, nodes):
        th = self.theta[:, None]
        return np.ascontiguousarray((1.0 - th) * nodes[self.idx] + th * nodes[self.idx + 1])

    # dynamics
    def forward(self, z):
        x0, nodes = self.split(z)
        U = self.u_steps(nodes)
        if self.fast is not None:
            X, Ms, Ns, status = kernels.fixed_forward(np.ascontiguousarray(x0), U, self.h, self.gamma, *self.fast,
                                                      self.newton_tol, self.newton_maxiter)
            if status:
                j = status - 1
                raise StepFailure(f"Newton failed at t={j * self.h:.6g}", j * self.h, X[j])
        else:
            X, Ms, Ns = self._forward_python(x0, U)
        S = self.system.set
        max_psi = float(psi_batch(S, X).max())
        if max_psi > S.boundary_tol:
            raise InvarianceViolation(f"max psi = {max_psi:.3e}", {"max_psi": max_psi})
        return X, Ms, Ns

    def _forward_python(self, x0, U):
        fld = PenalizedField(self.system, self.gamma, None)
        B = self.system.f_phi_jac_u
        n, h = self.n, self.h
        X = np.empty((self.N + 1, n))
        Ms = np.empty((self.N, n, n))
        Ns = np.empty((self.N, n, self.m))
        X[0] = x0
        I = np.eye(n)
        for j in range(self.N):
            y = _euler_solve(fld, X[j], U[j], h, self.newton_tol, self.newton_maxiter)
            if y is None:
                raise StepFailure(f"Newton failed at t={j * h:.6g}", j * h, X[j])
            X[j + 1] = y
            _, J = fld.jac_u(y, U[j])
            L = I - h * J
            Ms[j] = np.linalg.solve(L, I)
            Ns[j] = np.linalg.solve(L, h * B(y, U[j]))
        return X, Ms, Ns

    # objective
    def terms(self, z, X) -> dict:
        x0, nodes = self.split(z)
        d = nodes - self.u_center
        dx = x0 - self.x0_center
        pen, _ = self.C1set.penalty(X[-1])
        return {
            "g": self.g.value(x0, X[-1]),
            "u0": 0.5 * float(d[0] @ d[0]),
            "z1": 0.5 * float(np.sum(np.diff(d, axis=0) ** 2)) / self.dt,
            "x0": 0.5 * float(dx @ dx),
            "endpoint": 0.5 * self.weight * pen,
        }

    def J_of_terms(self, t: dict) -> float:
        return t["g"] + t["u0"] + t["z1"] + t["x0"]

    def value(self, z) -> float:
        try:
            X, _, _ = self.forward(z)
        except (StepFailure, InvarianceViolation):
            return math.inf
        t = self.terms(z, X)
        return self.J_of_terms(t) + t["endpoint"]

    def value_and_grad(self, z):
        try:
            X, Ms, Ns = self.forward(z)
        except (StepFailure, InvarianceViolation):
            return math.inf, np.zeros(self.size)
        t = self.terms(z, X)
        A, G = self._adjoint(z, X, Ms, Ns)
        x0, nodes = self.split(z)
        d = nodes - self.u_center
        gn = np.zeros_like(nodes)
        w0 = (1.0 - self.theta)[:, None] * G
        w1 = self.theta[:, None] * G
        np.add.at(gn, self.idx, w0)
        np.add.at(gn, self.idx + 1, w1)
        gn[0] += d[0]
        Dd = np.diff(d, axis=0) / self.dt
        gn[:-1] -= Dd
        gn[1:] += Dd
        g0, _ = self.g.grad(x0, X[-1])
        gx0 = A[0] + g0 + (x0 - self.x0_center)
        grad = self.join(gx0, gn) if self.nx0 else gn.ravel()
        return self.J_of_terms(t) + t["endpoint"], grad

    def _adjoint(self, z, X, Ms, Ns):
        x0 = X[0]
        _, g1 = self.g.grad(x0, X[-1])
        _, pg = self.C1set.penalty(X[-1])
        aN = g1 + 0.5 * self.weight * pg
        return kernels.fixed_backward(np.ascontiguousarray(aN), Ms, Ns)

    def discrete_adjoint(self, z):
        """dJ/dx_j along the grid; the continuous adjoint is its negative (lambda = 1)."""
        X, Ms, Ns = self.forward(z)
        A, _ = self._adjoint(z, X, Ms, Ns)
        return self.t.copy(), A

    def run(self, z) -> PenaltyRun:
        X, _, _ = self.forward(z)
        u = self.control(z)
        fld = PenalizedField(self.system, self.gamma, u)
        sc = StepControl(n_out=self.N + 1)
        stats = {"n_steps": self.N, "h": self.h}
        if self.fast is not None:
            return _assemble_run(self.system, fld, self.t, X, None, sc, stats, self.fast, u)
        return _assemble_run(self.system, fld, self.t, X, None, sc, stats)


def _euler_solve(fld: PenalizedField, x, u, h, tol, maxiter):
    """Solve y = x + h F(y, u) by damped Newton. Returns y or None."""
    n = len(x)
    eye = np.eye(n)
    y = x.copy()
    F, J = fld.jac_u(y, u)
    G = -h * F
    gnorm = float(np.linalg.norm(G))
    for _ in range(maxiter):
        if not math.isfinite(gnorm):
            return None
        step = np.linalg.solve(eye - h * J, -G)
        lam = 1.0
        for _ in range(30):
            y_new = y + lam * step
            F_new, J_new = fld.jac_u(y_new, u)
            G_new = y_new - x - h * F_new
            gn = float(np.linalg.norm(G_new))
            if math.isfinite(gn) and (gn < gnorm or gn <= tol * (1.0 + float(np.linalg.norm(y_new)))):
                break
            lam *= 0.5
        else:
            return None
        y, J, G, gnorm = y_new, J_new, G_new, gn
        if float(np.linalg.norm(lam * step)) <= tol * (1.0 + float(np.linalg.norm(y))):
            return y
    return None


# -- solver -------------------------------------------------------------------

@dataclass
class SolveResult:
    run: PenaltyRun
    control: ControlPath
    J: float
    g_value: float
    kkt: dict
    trace: list
    z: np.ndarray
    gamma: float
    k: int
    mode: str
    C0k: EndpointSet
    C1k: EndpointSet
    x0_center: np.ndarray
    u_center: ControlPath
    n_nodes: int
    n_sub: int
    weight: float

    TRACE_COLUMNS = ("round", "weight", "iteration", "J", "pg_norm", "step")

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.TRACE_COLUMNS)
        for row in self.trace:
            w.writerow([row[0], repr(float(row[1])), row[2], repr(float(row[3])), repr(float(row[4])),
                        repr(float(row[5]))])
        return buf.getvalue()

    def bundle(self, scenario: str = "") -> dict:
        return {
            "scenario": scenario, "mode": self.mode, "gamma": self.gamma, "k": self.k,
            "n_nodes": self.n_nodes, "n_sub": self.n_sub, "weight": self.weight,
            "z": self.z.tolist(), "x0": self.run.x[0].tolist(), "control": self.control.to_spec(),
            "J": self.J, "g": self.g_value, "kkt": self.kkt,
            "C0k": self.C0k.to_spec(), "C1k": self.C1k.to_spec(),
            "x0_center": self.x0_center.tolist(), "u_center": self.u_center.to_spec(),
        }

    def bundle_json(self, scenario: str = "") -> str:
        return json.dumps(self.bundle(scenario), indent=2, sort_keys=True)


def transcription_from_bundle(system: System, problem: MayerProblem, bundle: dict, compiled: bool = True):
    """Rebuild the transcription and decision vector of a stored solution."""
    n, m = system.n, system.m
    tr = Transcription(system, bundle["gamma"], problem.g,
                       EndpointSet.from_spec(bundle["C0k"], n, system.set),
                       EndpointSet.from_spec(bundle["C1k"], n, system.set),
                       bundle["x0_center"], ControlPath.from_spec(bundle["u_center"], m),
                       bundle["weight"], bundle["n_nodes"], bundle["n_sub"], compiled)
    return tr, np.asarray(bundle["z"], dtype=float)


def _terminal(system, gamma, x0, u: ControlPath, n_nodes, n_sub):
    tr = Transcription(system, gamma, EndpointCost("zero"), EndpointSet((PointSet(np.asarray(x0, float)),)),
                       EndpointSet(()), x0, u, 0.0, n_nodes, n_sub)
    X, _, _ = tr.forward(tr.initial(x0, u))
    return X[-1]


def _solve_weights(tr: Transcription, z0, weights, endpoint_tol, kkt_tol, max_iter, trace, rnd):
    res = None
    for w in weights:
        tr.weight = w
        try:
            res = projected_lbfgs(tr.value_and_grad, z0, tr.constraint, kkt_tol, max_iter)
        except (MaxIterations, LineSearchFailure) as exc:
            exc.args = (f"{exc.args[0]} (gamma={tr.gamma:g}, weight={w:g})",)
            raise
        trace.extend((rnd, w) + row for row in res.trace)
        X, _, _ = tr.forward(res.z)
        if tr.C1set.distance(X[-1]) <= endpoint_tol:
            return res, w
        z0 = res.z
    return res, None


def solve_Pk(problem: MayerProblem, system: System, gamma: float, k: int = 0, init: Optional[ControlPath] = None,
             mode: str = "nc", n_nodes: int = 101, n_sub: int = 20, kkt_tol: float = 1e-6,
             endpoint_tol: float = 1e-6, weights=WEIGHTS, max_iter: int = 500, prox_rounds: int = 50,
             prox_tol: float = 1e-6, prox_ftol: float = 1e-5, oracle_h: float = 1e-4, compiled: bool = True) -> SolveResult:
    """Local solution of the transcribed problem at one gamma.

    ``mode='nc'`` centres the proximal terms on the problem's reference pair
    and uses the shifted endpoint sets C0(k), C1(k). ``mode='plain'`` centres
    them on the current iterate and uses C0 and C1 intersected with C; the
    re-centring stops when the iterate moves less than ``prox_tol`` in W^{1,2}
    or the cost g decreases by less than ``prox_ftol`` over a round.
    """
    S = system.set
    sched = PenaltySchedule((gamma,), system.Mbar, S.eta)
    n, m = system.n, system.m
    trace = []
    tube = {}
    if mode == "nc":
        ref = problem.reference
        if ref is None:
            raise PreconditionError("NC mode needs a reference pair")
        C0k = build_C0k(problem, S, sched, 0)
        start = C0k.project(ref.x0 if S.psi(ref.x0) < -S.boundary_tol else shift_inward(S, ref.x0, sched.rhos[0]))
        xbar = catching_up(system, ref.x0, ref.u, oracle_h)
        xgk1 = _terminal(system, gamma, start, ref.u, n_nodes, n_sub)
        C1k = build_C1k(problem, S, xbar.x[-1], xgk1)
        tr = Transcription(system, gamma, problem.g, C0k, C1k, ref.x0, ref.u, 0.0, n_nodes, n_sub, compiled)
        z0 = tr.initial(start, init if init is not None else ref.u)
        res, w = _solve_weights(tr, z0, weights, endpoint_tol, kkt_tol, max_iter, trace, 0)
        rounds = 1
        run = tr.run(res.z)
        xb = np.stack([np.interp(run.t, xbar.t, xbar.x[:, i]) for i in range(n)], axis=1)
        tube = {"tube_state": float(np.max(np.linalg.norm(run.x - xb, axis=1))),
                "tube_control": float(np.max(np.linalg.norm(tr.control(res.z).sample(run.t) - ref.u.sample(run.t),
                                                            axis=1)))}
    elif mode == "plain":
        C0k = problem.C0.intersect(StatePart(S))
        C1k = problem.C1.intersect(StatePart(S))
        x0_seed = problem.reference.x0 if problem.reference is not None else S.center
        u0 = init if init is not None else ControlPath.constant(np.zeros(m), n_nodes)
        x0c = C0k.project(x0_seed)
        uc = u0
        res = w = tr = None
        g_prev = math.inf
        for rounds in range(1, prox_rounds + 1):
            tr = Transcription(system, gamma, problem.g, C0k, C1k, x0c, uc, 0.0, n_nodes, n_sub, compiled)
            z0 = tr.initial(x0c, uc) if res is None else res.z
            res, w = _solve_weights(tr, z0, weights, endpoint_tol, kkt_tol, max_iter, trace, rounds - 1)
            x0_new, _ = tr.split(res.z)
            u_new = tr.control(res.z)
            moved = u_new.w12_distance(uc.resample(tr.grid)) + float(np.linalg.norm(x0_new - x0c))
            g_now = tr.terms(res.z, tr.forward(res.z)[0])["g"]
            x0c, uc = x0_new, u_new
            if moved <= prox_tol or g_prev - g_now <= prox_ftol:
                break
            g_prev = g_now
        run = tr.run(res.z)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    X = run.x
    terms = tr.terms(res.z, X)
    J = tr.J_of_terms(terms)
    viol = tr.C1set.distance(X[-1])
    kkt = {
        "pg_norm": res.pg_norm, "iterations": res.iterations, "converged": bool(res.converged and w is not None),
        "endpoint_violation": viol, "weight": tr.weight, "rounds": rounds, "kkt_tol": kkt_tol,
        "max_psi": float(run.psi.max()),
        "controls_admissible": bool(tr.control(res.z).admissible(system.U, 1e-12)),
    }
    kkt.update(tube)
    result = SolveResult(run, tr.control(res.z), J, terms["g"], kkt, trace, res.z, float(gamma), k, mode, C0k, C1k,
                         tr.x0_center, ControlPath(tr.grid, tr.u_center.copy()), n_nodes, n_sub, tr.weight)
    if w is None:
        raise InfeasibleEndpoint(f"endpoint violation {viol:.3e} after weight {weights[-1]:g}", result)
    return result


@dataclass
class ContinuationResult:
    results: list
    control_distances: list
    J_values: list
    converged: bool
    cont_tol: float

    @property
    def final(self) -> SolveResult:
        return self.results[-1]

    COLUMNS = ("gamma", "J", "g", "control_distance", "pg_norm", "endpoint_violation", "max_psi")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r, d in zip(self.results, self.control_distances):
            w.writerow([repr(r.gamma), repr(r.J), repr(r.g_value), "NA" if d is None else repr(d),
                        repr(r.kkt["pg_norm"]), repr(r.kkt["endpoint_violation"]), repr(r.kkt["max_psi"])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"converged": self.converged, "cont_tol": self.cont_tol, "J": self.J_values,
                "control_distances": self.control_distances,
                "J_drift": [b - a for a, b in zip(self.J_values, self.J_values[1:])]}


def continuation_solve(problem: MayerProblem, system: System, schedule: PenaltySchedule, mode: str = "nc",
                       init: Optional[ControlPath] = None, cont_tol: float = 1e-3, **kw) -> ContinuationResult:
    """solve_Pk along the schedule, each solve warm-started from the previous control.

    In NC mode without a reference pair, a plain solve at the first gamma
    supplies it. Non-convergence of the controls is reported, not raised.
    """
    if mode == "nc" and problem.reference is None:
        boot = solve_Pk(problem, system, schedule.gammas[0], 0, init=init, mode="plain", **kw)
        problem = replace(problem, reference=ReferencePair(boot.run.x[0].copy(), boot.control))
    results, dists, Js = [], [], []
    u = init
    for k, gamma in enumerate(schedule.gammas):
        r = solve_Pk(problem, system, gamma, k, init=u, mode=mode, **kw)
        dists.append(None if u is None or not results else r.control.w12_distance(results[-1].control))
        results.append(r)
        Js.append(r.J)
        u = r.control
    if len(results) == 1:
        conv = bool(results[0].kkt["converged"])
    else:
        conv = dists[-1] <= cont_tol
    return ContinuationResult(results, dists, Js, conv, cont_tol)


# -- brute-force oracle -------------------------------------------------------

def control_candidates(U, m: int, angles=(0.0, np.pi / 4, -np.pi / 4, np.pi / 2, -np.pi / 2)) -> np.ndarray:
    """Extreme control values: box vertices, or ball boundary points at the given angles."""
    if isinstance(U, Box):
        return np.array(list(itertools.product(*zip(U.lo, U.hi))), dtype=float)
    if isinstance(U, Ball):
        if m == 1:
            return np.array([U.center - U.radius, U.center + U.radius])
        return U.center + U.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    raise TypeError("brute force needs a box or ball control set")


@dataclass(frozen=True)
class BruteForceResult:
    cost: float
    nodes: np.ndarray
    n_candidates: int


def brute_force_grid(problem: MayerProblem, system: System, x0, n_nodes: int = 5, h: float = 1e-3,
                     values: Optional[np.ndarray] = None) -> BruteForceResult:
    """Exhaustive search over piecewise-linear controls whose nodes take extreme values,
    simulated by catching-up (the true sweeping dynamics)."""
    vals = control_candidates(system.U, system.m) if values is None else np.asarray(values, dtype=float)
    combos = np.array(list(itertools.product(range(len(vals)), repeat=n_nodes)))
    controls = vals[combos]
    x1 = catching_up_batch(system, x0, controls, h)
    x0v = np.atleast_1d(np.asarray(x0, dtype=float))
    costs = np.array([problem.g.value(x0v, x) for x in x1])
    i = int(np.argmin(costs))
    return BruteForceResult(float(costs[i]), controls[i], len(controls))
