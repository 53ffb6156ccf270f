"""Adjoint arcs and residuals of the maximum principle for the approximating problems.

The adjoint of the penalized dynamics is p' = -A(t)^T p with A the x-Jacobian
of the penalized field, integrated backward by implicit midpoint on the state
grid. Intervals where h ||A|| exceeds STIFF_STEP are split into substeps on a
Hermite interpolant of the state, since implicit midpoint oscillates in sign
across unresolved stiff layers. The control
adjoint is q(t) = q(0) - int_0^t (d_u f)^T p with q(0) = lam (u(0) - ubar(0)).

When the candidate control touches the boundary of a box or ball U, the
measure term Omega is reconstructed from the maximization condition: its
increments at the control nodes are projected onto the normal cone of U, and
any part that does not fit shows up in the maximization residual.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import minimize, minimize_scalar, nnls

from . import kernels
from .dynamics import PenalizedField, PenaltyRun
from .geometry import grad_psi_batch, psi_batch
from .model import Ball, Box, ControlPath, ControlSet, PiecewiseConstantSet, System

NC_TOL = 1e-3
STIFF_STEP = 0.5
NU_MASS_FLOOR = 1e-12
MAX_SUBSTEPS = 4096


class RegimeViolation(RuntimeError):
    pass


class StiffnessFailure(RuntimeError):
    def __init__(self, message, t):
        super().__init__(message)
        self.t = t


class DivergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AdjointArc:
    """p, q on the state grid, Omega per control cell, and the multiplier lam."""

    grid: np.ndarray
    p: np.ndarray
    q: np.ndarray
    lam: float
    cells: np.ndarray
    q_cells: np.ndarray
    omega_cells: np.ndarray
    omega_end: np.ndarray
    mu_mass: float

    @property
    def normalization(self) -> float:
        """||p(1)|| + ||q||_inf + ||mu|| + lam."""
        return (float(np.linalg.norm(self.p[-1])) + float(np.max(np.linalg.norm(self.q, axis=1)))
                + self.mu_mass + self.lam)

    def scaled(self, c: float) -> "AdjointArc":
        return replace(self, p=c * self.p, q=c * self.q, lam=c * self.lam, q_cells=c * self.q_cells,
                       omega_cells=c * self.omega_cells, omega_end=c * self.omega_end, mu_mass=c * self.mu_mass)

    def normalized(self) -> "AdjointArc":
        s = self.normalization
        return self if s == 0 else self.scaled(1.0 / s)

    def to_csv(self) -> str:
        """Columns t, p_1..p_n, q_1..q_m."""
        cols = {f"p_{i + 1}": self.p[:, i] for i in range(self.p.shape[1])}
        cols.update({f"q_{j + 1}": self.q[:, j] for j in range(self.q.shape[1])})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + list(cols))
        for i, t in enumerate(self.grid):
            w.writerow([repr(float(t))] + [repr(float(v[i])) for v in cols.values()])
        return buf.getvalue()


# -- adjoint integration ------------------------------------------------------

def _jacobians(system: System, gamma: float, times, X, u: ControlPath):
    fast = system.fast_params()
    if fast is not None:
        return kernels.jac_batch(np.ascontiguousarray(times), np.ascontiguousarray(X),
                                 np.ascontiguousarray(u.grid), np.ascontiguousarray(u.nodes), float(gamma), *fast)
    fld = PenalizedField(system, gamma, u)
    return np.array([fld.jac_u(x, u(t))[1] for t, x in zip(times, X)])


def adjoint_basis(system: System, run: PenaltyRun, u: ControlPath, refine: int = 1) -> np.ndarray:
    """p-arcs for the unit terminal values e_1..e_n, shape (n, N, n).

    Each state interval gets at least ``refine`` substeps, and more where
    h ||A|| > STIFF_STEP.
    """
    t, X = run.t, run.x
    h = np.diff(t)
    tm = 0.5 * (t[:-1] + t[1:])
    As = _jacobians(system, run.gamma, tm, 0.5 * (X[:-1] + X[1:]), u)
    _check_finite(As, tm)
    stiff = np.ceil(h * np.linalg.norm(As, axis=(1, 2)) / STIFF_STEP)
    r = np.clip(np.maximum(stiff, int(refine)), 1, MAX_SUBSTEPS).astype(np.int64)
    hs = h
    if np.any(r > 1):
        cell = np.repeat(np.arange(len(h)), r)
        start = np.repeat(np.cumsum(r) - r, r)
        frac = (np.arange(len(cell)) - start + 0.5) / r[cell]
        tm = t[cell] + h[cell] * frac
        As = _jacobians(system, run.gamma, tm, CubicHermiteSpline(t, X, run.xdot, axis=0)(tm), u)
        _check_finite(As, tm)
        hs = h[cell] / r[cell]
    ends = np.concatenate([[0], np.cumsum(r)])
    out = []
    for i in range(system.n):
        e = np.zeros(system.n)
        e[i] = 1.0
        P = kernels.adjoint_backward(np.ascontiguousarray(As), np.ascontiguousarray(hs), e)
        if not np.all(np.isfinite(P)):
            raise StiffnessFailure("adjoint overflow", float(t[0]))
        out.append(P[ends])
    return np.array(out)


def _check_finite(As, tm):
    if not np.all(np.isfinite(As)):
        k = int(np.argmax(~np.all(np.isfinite(As), axis=(1, 2))))
        raise StiffnessFailure(f"non-finite Jacobian at t={tm[k]:.6g}", float(tm[k]))


def _control_adjoint(system: System, run: PenaltyRun, u: ControlPath, p: np.ndarray, q0) -> np.ndarray:
    """q(t) = q0 - int_0^t B(x, u)^T p by trapezoid on the state grid."""
    integrand = p @ system.field.B
    inc = 0.5 * np.diff(run.t)[:, None] * (integrand[:-1] + integrand[1:])
    return q0 - np.vstack([np.zeros((1, system.m)), np.cumsum(inc, axis=0)])


def _cell_means(t, values, cells):
    """Average of a grid function over each control cell (trapezoid); cells must be grid points of t."""
    idx = np.searchsorted(t, cells - 1e-12)
    if not np.allclose(t[np.minimum(idx, len(t) - 1)], cells, atol=1e-12, rtol=0):
        raise ValueError("control cells must be nodes of the state grid")
    inc = 0.5 * np.diff(t)[:, None] * (values[:-1] + values[1:])
    cum = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(inc, axis=0)])
    return np.diff(cum[idx], axis=0) / np.diff(cells)[:, None]


def _cone_project(Uk: ControlSet, uval, v, tol=1e-9):
    """Projection of v onto the normal cone of U at uval."""
    if isinstance(Uk, Box):
        out = np.zeros_like(v)
        hi = uval >= Uk.hi - tol
        lo = uval <= Uk.lo + tol
        out[hi] = np.maximum(v[hi], 0.0)
        out[lo & ~hi] = np.minimum(v[lo & ~hi], 0.0)
        return out
    if isinstance(Uk, Ball):
        G = Uk.normal_generators(uval, tol)
        if G.shape[1] == 0:
            return np.zeros_like(v)
        nvec = G[:, 0]
        return max(0.0, float(nvec @ v)) * nvec
    G = Uk.normal_generators(uval, tol)
    if G.shape[1] == 0:
        return np.zeros_like(v)
    coef, _ = nnls(G, v)
    return G @ coef


def _supported(U: ControlSet) -> bool:
    if isinstance(U, PiecewiseConstantSet):
        return all(_supported(s) for s in U.sets)
    return isinstance(U, (Box, Ball))


def _slopes_on(u: ControlPath, cells):
    return u.resample(cells).slopes


def reconstruct_omega(lam, q_cells, q_end, u: ControlPath, ubar: ControlPath, U: Optional[ControlSet], cells):
    """Omega per cell, Omega(1), and its total variation."""
    m = q_cells.shape[1]
    target = lam * (_slopes_on(u, cells) - _slopes_on(ubar, cells)) - q_cells
    omega = np.zeros_like(target)
    if U is None:
        return omega, np.zeros(m), 0.0
    nodes = u.sample(cells)
    cur = np.zeros(m)
    mass = 0.0
    for i in range(len(target)):
        d = _cone_project(U.at(cells[i]), nodes[i], target[i] - cur)
        cur = cur + d
        mass += float(np.linalg.norm(d))
        omega[i] = cur
    d = _cone_project(U.at(cells[-1]), nodes[-1], -q_end - cur)
    mass += float(np.linalg.norm(d))
    return omega, cur + d, mass


def regime_check(U: ControlSet, u: ControlPath, cells, active: str = "reconstruct") -> int:
    """Number of control nodes on the boundary of U; raises RegimeViolation when that is not allowed."""
    if active not in ("reconstruct", "reject"):
        raise ValueError(f"unknown active-constraint policy {active!r}")
    touching = sum(U.at(t).normal_generators(v, 1e-9).shape[1] > 0 for t, v in zip(cells, u.sample(cells)))
    if touching > 1:
        if active == "reject":
            raise RegimeViolation(f"control constraint active at {touching} nodes")
        if not _supported(U):
            raise RegimeViolation("active constraint on an unsupported control set")
    return int(touching)


def integrate_adjoint(system: System, run: PenaltyRun, u: ControlPath, lam: float, pT,
                      ubar: Optional[ControlPath] = None, refine: int = 1, cells=None,
                      active: str = "reconstruct", basis: Optional[np.ndarray] = None) -> AdjointArc:
    """Adjoint arc for terminal value pT and multiplier lam.

    ``active='reject'`` raises RegimeViolation when the control touches the
    boundary of U on more than isolated nodes; ``'reconstruct'`` rebuilds
    Omega for box and ball sets.
    """
    pT = np.atleast_1d(np.asarray(pT, dtype=float))
    ubar = u if ubar is None else ubar
    cells = u.grid if cells is None else np.asarray(cells, dtype=float)
    if basis is None:
        regime_check(system.U, u, cells, active)
        basis = adjoint_basis(system, run, u, refine)
    p = np.tensordot(pT, basis, axes=(0, 0))
    q0 = lam * (u(0.0) - ubar(0.0))
    q = _control_adjoint(system, run, u, p, q0)
    q_cells = _cell_means(run.t, q, cells)
    omega, omega_end, mass = reconstruct_omega(lam, q_cells, q[-1], u, ubar, system.U, cells)
    return AdjointArc(run.t.copy(), p, q, float(lam), cells, q_cells, omega, omega_end, mass)


# -- residuals ----------------------------------------------------------------

def residual_maximization(arc: AdjointArc, u: ControlPath, ubar: ControlPath) -> float:
    """max over control cells of ||lam (u' - ubar') - (q + Omega)||, q averaged over each cell."""
    r = arc.lam * (_slopes_on(u, arc.cells) - _slopes_on(ubar, arc.cells)) - (arc.q_cells + arc.omega_cells)
    return float(np.max(np.linalg.norm(r, axis=1)))


def residual_transversality(g, arc: AdjointArc, run: PenaltyRun, C0k, C1k, x0_center):
    """Distances of the endpoint adjoint values to the normal cones of C0(k) and C1(k)."""
    x0, x1 = run.x[0], run.x[-1]
    g0, g1 = g.grad(x0, x1)
    v0 = arc.p[0] - arc.lam * (g0 + (x0 - np.asarray(x0_center, dtype=float)))
    v1 = -arc.p[-1] - arc.lam * g1
    return C0k.normal_cone_distance(x0, v0), C1k.normal_cone_distance(x1, v1)


def residual_transversality_q(arc: AdjointArc) -> float:
    """||q(1) + Omega(1)||."""
    return float(np.linalg.norm(arc.q[-1] + arc.omega_end))


def slackness_integral(system: System, run: PenaltyRun, arc: AdjointArc) -> float:
    """int xi |<grad psi(x), p>| dt."""
    gp = np.abs(np.sum(grad_psi_batch(system.set, run.x) * arc.p, axis=1))
    return float(np.trapezoid(run.xi * gp, run.t))


def nu_density(system: System, run: PenaltyRun, arc: AdjointArc) -> np.ndarray:
    """gamma xi <grad psi(x), p>, the penalty approximation of the state-constraint measure."""
    gp = np.sum(grad_psi_batch(system.set, run.x) * arc.p, axis=1)
    return run.gamma * run.xi * gp


def contact_mask(system: System, xbar: np.ndarray, inflation: Optional[float] = None) -> np.ndarray:
    S = system.set
    inflation = 2 * S.boundary_tol if inflation is None else inflation
    return psi_batch(S, xbar) >= -inflation


def nu_mass_split(system: System, run: PenaltyRun, arc: AdjointArc, contact: np.ndarray):
    """(mass off the contact set, total mass) of |nu|."""
    dens = np.abs(nu_density(system, run, arc))
    total = float(np.trapezoid(dens, run.t))
    off = float(np.trapezoid(np.where(contact, 0.0, dens), run.t))
    return off, total


def weak_max_convexU(system: System, arc: AdjointArc, run: PenaltyRun, u: ControlPath) -> float:
    """max_t [sigma_U(B^T p) - <B^T p, u(t)>], clamped at 0 (linear maximization over convex U)."""
    U = system.U
    if not _supported(U):
        raise TypeError("weak maximization needs a convex box or ball control set")
    Ut = u.sample(run.t)
    worst = 0.0
    for t, x, uu, pp in zip(run.t, run.x, Ut, arc.p):
        s = system.f_phi_jac_u(x, uu).T @ pp
        worst = max(worst, U.at(t).support(s) - float(s @ uu))
    return worst


# -- reports ------------------------------------------------------------------

@dataclass
class NCReport:
    residuals: dict
    tolerances: dict
    multiplier: dict
    fit: dict
    notes: list = field(default_factory=list)

    @property
    def verdicts(self) -> dict:
        return {k: ("PASS" if v <= self.tolerances[k] else "FAIL") for k, v in self.residuals.items()
                if k in self.tolerances}

    @property
    def passed(self) -> bool:
        return all(v == "PASS" for v in self.verdicts.values())

    def to_json(self) -> str:
        d = {"residuals": self.residuals, "tolerances": self.tolerances, "verdicts": self.verdicts,
             "verdict": "PASS" if self.passed else "FAIL", "multiplier": self.multiplier, "fit": self.fit,
             "notes": self.notes}
        return json.dumps(d, indent=2, sort_keys=True)


def limit_residuals(system: System, sweeps: list, xbar: Optional[np.ndarray] = None,
                    inflation: Optional[float] = None) -> dict:
    """Limit-object residuals from arcs ordered by gamma; the last pair stands for the limit.

    Returns slackness, nu mass off the inflated contact set (absolute and as a
    fraction of the total), the limit nontriviality defect and the TV of p per sweep.
    """
    tvs = [float(np.sum(np.linalg.norm(np.diff(arc.p, axis=0), axis=1))) for _, arc in sweeps]
    if len(tvs) >= 3 and tvs[-1] > tvs[-2] > tvs[-3]:
        warnings.warn(f"TV of p grows across the sweep: {tvs[-3:]}", DivergenceWarning, stacklevel=2)
    run, arc = sweeps[-1]
    xb = run.x if xbar is None else xbar
    contact = contact_mask(system, xb, inflation)
    off, total = nu_mass_split(system, run, arc, contact)
    s = float(np.linalg.norm(arc.p[-1])) + arc.lam
    limit_sum = (float(np.linalg.norm(arc.p[-1])) + arc.lam) / s if s > 0 else 0.0
    return {
        "slackness": slackness_integral(system, run, arc),
        "nu_mass_off_contact": off,
        "nu_mass_total": total,
        "nu_off_ratio": off / total if total > NU_MASS_FLOOR else 0.0,
        "limit_nontriviality": abs(limit_sum - 1.0),
        "p_tv": tvs,
    }


@dataclass
class FitResult:
    lam: float
    pT: np.ndarray
    objective: float
    evaluations: int


def fit_multiplier(objective, n: int, grid_r: int = 21, grid_theta: int = 72, grid_1d: int = 401) -> FitResult:
    """Minimize objective(lam, pT) over lam = 1 - ||pT||, ||pT|| <= 1 (deterministic grid + local polish)."""
    count = [0]

    def f(pT):
        count[0] += 1
        return objective(1.0 - float(np.linalg.norm(pT)), pT)

    if n == 1:
        ss = np.linspace(-1.0, 1.0, grid_1d)
        vals = [f(np.array([s])) for s in ss]
        i = int(np.argmin(vals))
        lo, hi = ss[max(i - 1, 0)], ss[min(i + 1, len(ss) - 1)]
        best_s, best_v = ss[i], vals[i]
        if hi > lo:
            r = minimize_scalar(lambda s: f(np.array([s])), bounds=(lo, hi), method="bounded",
                                options={"xatol": 1e-12})
            if r.fun < best_v:
                best_s, best_v = float(r.x), float(r.fun)
        pT = np.array([best_s])
    else:
        best_v, best = math.inf, np.zeros(n)
        dirs = _directions(n, grid_theta)
        for r in np.linspace(0.0, 1.0, grid_r):
            for d in (dirs if r > 0 else dirs[:1]):
                v = f(r * d)
                if v < best_v:
                    best_v, best = v, r * d

        def g(y):
            nrm = float(np.linalg.norm(y))
            return f(y if nrm <= 1 else y / nrm) + max(0.0, nrm - 1.0) ** 2

        res = minimize(g, best, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
        if res.fun < best_v:
            y = res.x
            nrm = float(np.linalg.norm(y))
            best, best_v = (y if nrm <= 1 else y / nrm), float(res.fun)
        pT = best
    return FitResult(1.0 - float(np.linalg.norm(pT)), pT, float(best_v), count[0])


def _directions(n, k):
    if n == 2:
        th = 2 * np.pi * np.arange(k) / k
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    from scipy.stats import norm, qmc

    z = qmc.Halton(d=n, scramble=False).random(k + 1)[1:]
    g = norm.ppf(np.clip(z, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def check_candidate(system: System, g, run: PenaltyRun, u: ControlPath, ubar: ControlPath, x0_center,
                    C0k, C1k, xbar: Optional[np.ndarray] = None, tol: float = NC_TOL, refine: int = 1,
                    inflation: Optional[float] = None, active: str = "reconstruct") -> tuple:
    """Fit (lam, pT), normalize, and score every condition. Returns (NCReport, AdjointArc)."""
    cells = u.grid
    touching = regime_check(system.U, u, cells, active)
    basis = adjoint_basis(system, run, u, refine)
    xb = run.x if xbar is None else xbar
    contact = contact_mask(system, xb, inflation)

    def arc_for(lam, pT):
        return integrate_adjoint(system, run, u, lam, pT, ubar, refine, cells, basis=basis)

    def objective(lam, pT):
        arc = arc_for(lam, pT)
        r0, r1 = residual_transversality(g, arc, run, C0k, C1k, x0_center)
        off, _ = nu_mass_split(system, run, arc, contact)
        terms = [residual_maximization(arc, u, ubar), r0, r1, residual_transversality_q(arc),
                 slackness_integral(system, run, arc), off]
        return float(sum(t * t for t in terms))

    fit = fit_multiplier(objective, system.n)
    raw = arc_for(fit.lam, fit.pT)
    S = raw.normalization
    arc = raw.normalized()
    r0, r1 = residual_transversality(g, arc, run, C0k, C1k, x0_center)
    lim = limit_residuals(system, [(run, arc)], xb, inflation)
    fine = integrate_adjoint(system, run, u, fit.lam, fit.pT, ubar, 2 * refine, cells).scaled(1.0 / S)
    residuals = {
        "adjoint_consistency": float(np.max(np.abs(fine.p - arc.p))),
        "maximization": residual_maximization(arc, u, ubar),
        "transversality_initial": r0,
        "transversality_final": r1,
        "transversality_q": residual_transversality_q(arc),
        "nontriviality": abs(arc.normalization - 1.0),
        "slackness": lim["slackness"],
        "nu_off_ratio": lim["nu_off_ratio"],
        "weak_maximization": weak_max_convexU(system, arc, run, u) if _supported(system.U) else math.nan,
    }
    tolerances = {k: tol for k in residuals}
    tolerances["nontriviality"] = 1e-12
    report = NCReport(
        residuals, tolerances,
        {"lambda": arc.lam, "pT": arc.p[-1].tolist(), "raw_lambda": fit.lam, "raw_pT": fit.pT.tolist(),
         "normalization_raw": S, "mu_mass": arc.mu_mass, "active_control_nodes": touching},
        {"objective": fit.objective, "evaluations": fit.evaluations, "nu_mass_total": lim["nu_mass_total"],
         "nu_mass_off_contact": lim["nu_mass_off_contact"]},
        ["best-fit multiplier from least squares; no uniqueness claim",
         "residuals are computed after dividing by the nontriviality sum"],
    )
    return report, arc


__all__ = ["AdjointArc", "NCReport", "RegimeViolation", "StiffnessFailure", "DivergenceWarning",
           "integrate_adjoint", "residual_maximization", "residual_transversality", "limit_residuals",
           "weak_max_convexU", "check_candidate", "fit_multiplier"]
