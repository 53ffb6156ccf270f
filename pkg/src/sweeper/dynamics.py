"""Penalized dynamics x' = f_Phi(x, u) - gamma exp(gamma psi(x)) grad psi(x).

The penalty term has stiffness of order gamma^2 near the boundary, so the
integrator is the implicit midpoint rule with a damped Newton solve using the
analytic Jacobian, and step-doubling error control.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import kernels
from .geometry import alpha_of_gamma
from .model import ControlPath, System

N_OUT = 2001


class StepFailure(RuntimeError):
    def __init__(self, message, t, x):
        super().__init__(message)
        self.t = t
        self.x = np.asarray(x)


class InvarianceViolation(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class StepControl:
    atol: float = 1e-10
    rtol: float = 0.0
    h_max: float = 1e-2
    h_min: float = 1e-13
    newton_tol: float = 1e-13
    newton_maxiter: int = 40
    n_out: int = N_OUT
    invariance_tol: float = 1e-8


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray

    def __post_init__(self):
        if len(self.t) != len(self.x):
            raise ValueError("state count must equal grid count")


@dataclass(frozen=True)
class PenaltyRun:
    trajectory: Trajectory
    gamma: float
    xi: np.ndarray
    psi: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def t(self):
        return self.trajectory.t

    @property
    def x(self):
        return self.trajectory.x

    @property
    def xdot(self):
        return self.trajectory.xdot

    def to_csv(self) -> str:
        return trajectory_csv(self.trajectory, {"xi": self.xi, "psi": self.psi})


def trajectory_csv(traj: Trajectory, extra: Optional[dict] = None) -> str:
    n = traj.x.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"xdot_{i + 1}" for i in range(n)] + list(extra))
    cols = [traj.t[:, None], traj.x, traj.xdot] + [np.asarray(v, dtype=float)[:, None] for v in extra.values()]
    for row in np.hstack(cols):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def penalty_multiplier(gamma: float, psi_values) -> np.ndarray:
    """xi = gamma exp(gamma psi), evaluated elementwise."""
    return gamma * np.exp(gamma * np.asarray(psi_values, dtype=float))


class PenalizedField:
    """Right-hand side and Jacobian of the penalized system for a fixed control."""

    def __init__(self, system: System, gamma: float, u: ControlPath):
        self.system = system
        self.gamma = float(gamma)
        self.u = u
        S = system.set
        self.psi, self.grad, self.hess = S.psi, S.grad_psi, S.hess_psi
        self.n = system.n

    def weight(self, x) -> float:
        g = self.gamma * self.psi(x)
        if g > 700.0:
            return math.inf
        return self.gamma * math.exp(g)

    def rhs(self, x, t):
        return self.rhs_u(x, self.u(t))

    def rhs_u(self, x, u):
        return self.system.f_phi(x, u) - self.weight(x) * self.grad(x)

    def jac_u(self, x, uval):
        """(F, dF/dx) at a given control value."""
        xi = self.weight(x)
        g = self.grad(x)
        F = self.system.f_phi(x, uval) - xi * g
        J = self.system.f_phi_jac_x(x, uval) - xi * (self.hess(x) + self.gamma * np.outer(g, g))
        return F, J


def midpoint_solve(fld: PenalizedField, x, uval_mid, h, tol, maxiter):
    """Solve y = x + h F((x + y)/2) by damped Newton. Returns y or None."""
    n = len(x)
    eye = np.eye(n)
    y = x.copy()
    F, J = fld.jac_u(x, uval_mid)
    G = -h * F
    gnorm = float(np.linalg.norm(G))
    for _ in range(maxiter):
        if not math.isfinite(gnorm):
            return None
        step = np.linalg.solve(eye - 0.5 * h * J, -G)
        lam = 1.0
        for _ in range(30):
            y_new = y + lam * step
            F_new, J_new = fld.jac_u(0.5 * (x + y_new), uval_mid)
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


def integrate_penalized(system: System, gamma: float, x0, u: ControlPath,
                        step_ctrl: Optional[StepControl] = None, compiled: bool = True) -> PenaltyRun:
    """Adaptive implicit-midpoint solution of the penalized system on [0, 1].

    The adaptive solution is resampled on a uniform grid of ``n_out`` points
    by cubic Hermite interpolation; velocities are the right-hand side at the
    output nodes, not differences of states.
    """
    sc = step_ctrl or StepControl()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    S = system.set
    if S.psi(x0) > S.boundary_tol:
        raise ValueError(f"x0 must lie in C, psi(x0)={S.psi(x0):.3e}")
    fld = PenalizedField(system, gamma, u)
    fast = system.fast_params() if compiled else None
    if fast is not None:
        ugrid = np.ascontiguousarray(u.grid)
        unodes = np.ascontiguousarray(u.nodes)
        T, X, status, n_acc, n_rej = kernels.integrate_adaptive(
            x0, ugrid, unodes, float(gamma), *fast, sc.atol, sc.rtol, sc.h_max, sc.h_min,
            sc.newton_tol, sc.newton_maxiter)
        if status:
            reason = "Newton failed" if status == 1 else "step size underflow"
            raise StepFailure(f"{reason} at t={T[-1]:.6g}", T[-1], X[-1])
        dX = kernels.rhs_batch(T, X, ugrid, unodes, float(gamma), *fast)
        return _assemble_run(system, fld, T, X, dX, sc, {"n_accepted": n_acc, "n_rejected": n_rej,
                                                         "h_min_used": float(np.min(np.diff(T)))}, fast, u)

    breaks = [float(b) for b in u.grid[1:]]
    t, x = 0.0, x0.copy()
    h = min(1e-2, 1.0 / gamma, sc.h_max)
    T, X = [0.0], [x.copy()]
    n_acc = n_rej = 0
    bi = 0
    while t < 1.0:
        while breaks[bi] <= t + 1e-15:
            bi += 1
        h_try = min(h, breaks[bi] - t)
        if breaks[bi] - t - h_try < 1e-12:
            h_try = breaks[bi] - t
        full = midpoint_solve(fld, x, u(t + 0.5 * h_try), h_try, sc.newton_tol, sc.newton_maxiter)
        half = None
        if full is not None:
            hh = 0.5 * h_try
            half1 = midpoint_solve(fld, x, u(t + 0.5 * hh), hh, sc.newton_tol, sc.newton_maxiter)
            if half1 is not None:
                half = midpoint_solve(fld, half1, u(t + 1.5 * hh), hh, sc.newton_tol, sc.newton_maxiter)
        if half is None:
            n_rej += 1
            h = 0.25 * h_try
            if h < sc.h_min:
                raise StepFailure(f"Newton failed at t={t:.6g}", t, x)
            continue
        err = float(np.linalg.norm(half - full)) / 3.0
        # dense-output check: cubic Hermite midpoint must match the half-step state
        herm = 0.5 * (x + half) + 0.125 * h_try * (fld.rhs_u(x, u(t)) - fld.rhs_u(half, u(t + h_try)))
        e2 = float(np.linalg.norm(herm - half1))
        err = max(err, e2 if math.isfinite(e2) else math.inf)
        tol = sc.atol + sc.rtol * float(np.linalg.norm(half))
        if err <= tol:
            t = breaks[bi] if h_try == breaks[bi] - t else t + h_try
            x = half
            T.append(t)
            X.append(x.copy())
            n_acc += 1
        else:
            n_rej += 1
        fac = 4.0 if err == 0 else min(4.0, max(0.2, 0.9 * (tol / err) ** (1.0 / 3.0)))
        h = min(sc.h_max, h_try * fac)
        if h < sc.h_min:
            raise StepFailure(f"step size underflow at t={t:.6g}", t, x)

    T = np.array(T)
    X = np.array(X)
    dX = np.array([fld.rhs(xi, ti) for ti, xi in zip(T, X)])
    return _assemble_run(system, fld, T, X, dX, sc, {"n_accepted": n_acc, "n_rejected": n_rej,
                                                     "h_min_used": float(np.min(np.diff(T)))})


def _assemble_run(system, fld, T, X, dX, sc, stats, fast=None, u=None) -> PenaltyRun:
    t_out = np.linspace(0.0, 1.0, sc.n_out)
    if len(T) == len(t_out) and np.array_equal(T, t_out):
        x_out = X
    else:
        x_out = CubicHermiteSpline(T, X, dX, axis=0)(t_out)
    S = system.set
    psi_out = np.array([S.psi(xi) for xi in x_out])
    gamma = fld.gamma
    xi_out = penalty_multiplier(gamma, psi_out)
    if fast is not None:
        xdot = kernels.rhs_batch(t_out, np.ascontiguousarray(x_out), np.ascontiguousarray(u.grid),
                                 np.ascontiguousarray(u.nodes), gamma, *fast)
    else:
        xdot = np.array([fld.rhs(xv, tv) for tv, xv in zip(t_out, x_out)])
    speed2 = np.sum(xdot**2, axis=1)
    energy = float(np.trapezoid(speed2, t_out))
    diag = dict(stats)
    diag.update({
        "max_psi": float(psi_out.max()),
        "max_xi": float(xi_out.max()),
        "max_speed": float(np.sqrt(speed2.max())),
        "energy": energy,
        "energy_bound": system.Mbar**2 + 2.0,
        "energy_ok": bool(energy <= system.Mbar**2 + 2.0 + 1e-6),
    })
    if diag["max_psi"] > sc.invariance_tol:
        raise InvarianceViolation(f"max psi = {diag['max_psi']:.3e} exceeds {sc.invariance_tol:g}", diag)
    return PenaltyRun(Trajectory(t_out, x_out, xdot), gamma, xi_out, psi_out, diag)


@dataclass
class BoundReport:
    gamma: float
    alpha: float
    containment: Optional[float]
    xi_excess: Optional[float]
    speed_excess: Optional[float]
    invariance: float
    report_tol: float
    started_in_Ck: bool

    @property
    def passed(self) -> bool:
        checks = [self.invariance <= 1e-8]
        if self.started_in_Ck:
            checks += [self.containment <= 1e-8, self.xi_excess <= self.report_tol,
                       self.speed_excess <= self.report_tol]
        return all(checks)

    def as_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def check_bounds(run: PenaltyRun, system: System, started_in_Ck: bool, report_tol: float = 1e-6) -> BoundReport:
    """Residuals of C(k)-containment, the multiplier bound and the speed bound (clamped at 0)."""
    S = system.set
    alpha = alpha_of_gamma(run.gamma, S.eta, system.Mbar)
    max_psi = float(run.psi.max())
    speed = float(np.sqrt(np.max(np.sum(run.xdot**2, axis=1))))
    cont = xi_ex = sp_ex = None
    if started_in_Ck:
        cont = max(0.0, max_psi + alpha)
        xi_ex = max(0.0, float(run.xi.max()) - 2 * system.Mbar / S.eta)
        sp_ex = max(0.0, speed - (system.Mbar + 2 * system.Mbar * S.Mbar_psi / S.eta))
    return BoundReport(run.gamma, alpha, cont, xi_ex, sp_ex, max(0.0, max_psi), report_tol, started_in_Ck)
