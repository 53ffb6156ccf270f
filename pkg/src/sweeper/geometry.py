"""Constraint sets C = {psi <= 0}, their certified constants, and the penalty schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

BOUNDARY_TOL = 1e-9

SHAPES = ("interval", "ball", "ellipse", "custom")


class ScheduleDomainError(ValueError):
    """A penalty parameter is too small for the schedule (alpha would be <= 0)."""


class DegenerateGradientError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class CertificationError(ValueError):
    """The declared constants are contradicted by a sampled point."""

    def __init__(self, message: str, witness: np.ndarray, report: "CertificationReport"):
        super().__init__(message)
        self.witness = np.asarray(witness)
        self.report = report


@dataclass(frozen=True)
class SublevelSet:
    """C = {x : psi(x) <= 0} together with the constants the theory needs.

    ``eta`` is the gradient floor (||grad psi|| > 2 eta on the boundary),
    ``Mbar_psi`` bounds ||grad psi|| on C, ``2 M_psi`` is a Lipschitz constant
    of grad psi near C and ``rho`` the radius of the neighbourhood on which
    psi is C^{1,1}. ``bbox`` is a box known to contain C.
    """

    psi: Callable[[np.ndarray], float]
    grad_psi: Callable[[np.ndarray], np.ndarray]
    hess_psi: Callable[[np.ndarray], np.ndarray]
    eta: float
    Mbar_psi: float
    M_psi: float
    rho: float
    shape_tag: str
    bbox: tuple
    center: np.ndarray
    params: dict = field(default_factory=dict)
    boundary_tol: float = BOUNDARY_TOL

    @property
    def dim(self) -> int:
        return len(self.center)

    def __post_init__(self):
        if self.shape_tag not in SHAPES:
            raise ValueError(f"unknown shape_tag {self.shape_tag!r}")
        for name in ("eta", "Mbar_psi", "M_psi", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.M_psi < 4 * self.eta / self.rho * (1 - 1e-12):
            raise ValueError("M_psi must be at least 4*eta/rho")

    def quadratic_weights(self):
        """(center, weights, level) when psi = sum w_i (x_i - c_i)^2 - level, else None."""
        w = self.params.get("_weights")
        if w is None:
            return None
        return self.center, np.asarray(w, dtype=float), float(self.params["_level"])


def _diag_quadratic(center, weights, level):
    c = np.asarray(center, dtype=float)
    w = np.asarray(weights, dtype=float)
    H = np.diag(2.0 * w)

    def psi(x):
        d = np.asarray(x, dtype=float) - c
        return float(np.dot(w * d, d) - level)

    def grad(x):
        return 2.0 * w * (np.asarray(x, dtype=float) - c)

    def hess(x):
        return H

    return psi, grad, hess


def interval(lo: float = -1.0, hi: float = 1.0, eta: Optional[float] = None) -> SublevelSet:
    """The interval [lo, hi] as the sublevel set of (x - c)^2 - r^2."""
    c = 0.5 * (lo + hi)
    r = 0.5 * (hi - lo)
    return ball([c], r, eta=eta, _tag="interval")


def ball(center: Sequence[float], radius: float, eta: Optional[float] = None, _tag="ball") -> SublevelSet:
    center = np.atleast_1d(np.asarray(center, dtype=float))
    r = float(radius)
    if eta is None:
        eta = 0.9 * r
    w = np.ones_like(center)
    psi, grad, hess = _diag_quadratic(center, w, r * r)
    M_psi = 1.0
    pad = 0.1 * r
    return SublevelSet(
        psi, grad, hess,
        eta=float(eta), Mbar_psi=2.0 * r, M_psi=M_psi, rho=4.0 * eta / M_psi,
        shape_tag=_tag, bbox=(center - r - pad, center + r + pad), center=center,
        params={"center": center.tolist(), "radius": r, "_weights": w, "_level": r * r},
    )


def ellipse(center: Sequence[float], semi_axes: Sequence[float], eta: Optional[float] = None) -> SublevelSet:
    """sum (x_i - c_i)^2 / a_i^2 - 1; the gradient is smallest at the major vertices."""
    center = np.asarray(center, dtype=float)
    a = np.asarray(semi_axes, dtype=float)
    if eta is None:
        eta = 0.9 / a.max()
    w = 1.0 / a**2
    psi, grad, hess = _diag_quadratic(center, w, 1.0)
    M_psi = float(w.max())
    pad = 0.1 * a.max()
    return SublevelSet(
        psi, grad, hess,
        eta=float(eta), Mbar_psi=float(2.0 / a.min()), M_psi=M_psi, rho=4.0 * eta / M_psi,
        shape_tag="ellipse", bbox=(center - a - pad, center + a + pad), center=center,
        params={"center": center.tolist(), "semi_axes": a.tolist(), "_weights": w, "_level": 1.0},
    )


def custom(psi, grad_psi, hess_psi, bbox, center, eta, Mbar_psi=None, M_psi=None, rho=None,
           sample_budget: int = 4096) -> SublevelSet:
    """Wrap user callables; constants that are not given are estimated by sampling."""
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    center = np.asarray(center, dtype=float)
    if Mbar_psi is None or M_psi is None:
        pts = _sample_box(lo, hi, sample_budget)
        inside = pts[np.array([psi(p) <= 0 for p in pts])]
        if Mbar_psi is None:
            Mbar_psi = max(float(np.linalg.norm(grad_psi(p))) for p in inside) * 1.05
        if M_psi is None:
            M_psi = 0.5 * max(float(np.linalg.norm(hess_psi(p), 2)) for p in pts) * 1.05
    if rho is None:
        rho = 4.0 * eta / M_psi
    return SublevelSet(psi, grad_psi, hess_psi, eta=float(eta), Mbar_psi=float(Mbar_psi),
                       M_psi=float(M_psi), rho=float(rho), shape_tag="custom",
                       bbox=(lo, hi), center=center, params={})


def from_spec(spec: dict) -> SublevelSet:
    """Build a set from its scenario description (shape_tag + params + constants)."""
    tag = spec.get("shape_tag")
    if tag is None:
        raise KeyError("set.shape_tag")
    if "eta" not in spec:
        raise KeyError("set.eta")
    eta = float(spec["eta"])
    if tag == "interval":
        lo, hi = spec.get("bounds", [-1.0, 1.0])
        return interval(float(lo), float(hi), eta=eta)
    if tag == "ball":
        return ball(spec.get("center", [0.0, 0.0]), float(spec.get("radius", 1.0)), eta=eta)
    if tag == "ellipse":
        return ellipse(spec.get("center", [0.0, 0.0]), spec["semi_axes"], eta=eta)
    if tag == "custom":
        import importlib

        modname, _, attr = spec["factory"].partition(":")
        factory = getattr(importlib.import_module(modname), attr)
        S = factory(eta=eta, **spec.get("args", {}))
        return replace(S, params={**S.params, "factory": spec["factory"], "args": dict(spec.get("args", {}))})
    raise ValueError(f"unknown shape_tag {tag!r}")


def to_spec(S: SublevelSet) -> dict:
    if S.shape_tag == "interval":
        c, r = S.params["center"][0], S.params["radius"]
        return {"shape_tag": "interval", "bounds": [c - r, c + r], "eta": S.eta}
    if S.shape_tag == "ball":
        return {"shape_tag": "ball", "center": S.params["center"], "radius": S.params["radius"], "eta": S.eta}
    if S.shape_tag == "ellipse":
        return {"shape_tag": "ellipse", "center": S.params["center"], "semi_axes": S.params["semi_axes"],
                "eta": S.eta}
    if "factory" in S.params:
        return {"shape_tag": "custom", "factory": S.params["factory"], "args": S.params["args"], "eta": S.eta}
    raise ValueError("custom sets cannot be serialized without their factory")


# -- penalty schedule -------------------------------------------------------

def alpha_of_gamma(gamma: float, eta: float, Mbar: float) -> float:
    """Depth alpha with gamma * exp(-alpha * gamma) = 2 Mbar / eta."""
    threshold = 2.0 * Mbar / eta
    if not gamma > threshold:
        raise ScheduleDomainError(f"gamma={gamma} must exceed 2*Mbar/eta={threshold}")
    return math.log(eta * gamma / (2.0 * Mbar)) / gamma


@dataclass(frozen=True)
class PenaltySchedule:
    gammas: tuple
    Mbar: float
    eta: float

    def __post_init__(self):
        g = tuple(float(v) for v in self.gammas)
        if not g:
            raise ValueError("empty schedule")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("gammas must be strictly ascending")
        object.__setattr__(self, "gammas", g)
        for v in g:
            alpha_of_gamma(v, self.eta, self.Mbar)

    @classmethod
    def geometric(cls, Mbar: float, eta: float, n: int = 8, gamma0: Optional[float] = None):
        gamma0 = 4.0 * Mbar / eta if gamma0 is None else gamma0
        return cls(tuple(gamma0 * 2.0**k for k in range(n)), Mbar, eta)

    @property
    def alphas(self) -> tuple:
        return tuple(alpha_of_gamma(g, self.eta, self.Mbar) for g in self.gammas)

    @property
    def rhos(self) -> tuple:
        return tuple(a / self.eta for a in self.alphas)

    def identity_residuals(self) -> np.ndarray:
        target = 2.0 * self.Mbar / self.eta
        return np.array([abs(g * math.exp(-a * g) - target) / target for g, a in zip(self.gammas, self.alphas)])

    def __len__(self):
        return len(self.gammas)


def psi_batch(S: SublevelSet, X) -> np.ndarray:
    """psi on each row of X (vectorized for diagonal quadratics)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = S.quadratic_weights()
    if q is None:
        return np.array([S.psi(x) for x in X])
    c, w, level = q
    d = X - c
    return (d * d) @ w - level


def grad_psi_batch(S: SublevelSet, X) -> np.ndarray:
    """grad psi on each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = S.quadratic_weights()
    if q is None:
        return np.array([S.grad_psi(x) for x in X])
    c, w, _ = q
    return 2.0 * w * (X - c)


def in_C(S: SublevelSet, x) -> bool:
    return S.psi(np.asarray(x, dtype=float)) <= 0.0


def in_Ck(S: SublevelSet, alpha_k: float, x) -> bool:
    return S.psi(np.asarray(x, dtype=float)) <= -alpha_k


def on_boundary(S: SublevelSet, x, tol: Optional[float] = None) -> bool:
    tol = S.boundary_tol if tol is None else tol
    return abs(S.psi(np.asarray(x, dtype=float))) <= tol


def shift_inward(S: SublevelSet, c, rho_k: float) -> np.ndarray:
    """Move a boundary point a distance rho_k along the inner normal."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if not on_boundary(S, c):
        raise PreconditionError(f"shift_inward needs a boundary point, psi(c)={S.psi(c):.3e}")
    g = S.grad_psi(c)
    gn = float(np.linalg.norm(g))
    if gn <= S.eta:
        raise DegenerateGradientError(f"||grad psi(c)||={gn} <= eta={S.eta}")
    return c - rho_k * g / gn


def inward_start(S: SublevelSet, c, rho_k: float) -> np.ndarray:
    """Boundary points are shifted inward, interior points are kept."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return shift_inward(S, c, rho_k) if on_boundary(S, c) else c


def shift_rank(S: SublevelSet, schedule: PenaltySchedule, boundary_points) -> Optional[int]:
    """Smallest k from which every shifted boundary point lies strictly inside C(k)."""
    ok = []
    for alpha, rho in zip(schedule.alphas, schedule.rhos):
        ok.append(all(S.psi(shift_inward(S, c, rho)) < -alpha for c in boundary_points))
    for k in range(len(ok)):
        if all(ok[k:]):
            return k
    return None


def prox_radius(S: SublevelSet) -> float:
    return S.eta / S.M_psi


# -- certification ----------------------------------------------------------

@dataclass
class CertificationReport:
    passed: bool
    min_boundary_grad: float
    eps_estimate: float
    Mbar_psi_empirical: float
    M_psi_empirical: float
    n_boundary: int
    n_interior: int
    witness: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["witness"] = None if self.witness is None else self.witness.tolist()
        return d


def _sample_box(lo, hi, n, seed_skip=0) -> np.ndarray:
    sampler = qmc.Halton(d=len(lo), scramble=False)
    if seed_skip:
        sampler.fast_forward(seed_skip)
    u = sampler.random(n)
    return lo + (hi - lo) * u


def boundary_points(S: SublevelSet, n: int) -> np.ndarray:
    """Deterministic points on the boundary, found by radial bisection from the centre."""
    d = S.dim
    if d == 1:
        dirs = np.array([[-1.0], [1.0]])
    elif d == 2:
        th = 2 * np.pi * np.arange(n) / n
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        z = qmc.Halton(d=d, scramble=False).random(n + 1)[1:]
        from scipy.stats import norm

        g = norm.ppf(np.clip(z, 1e-12, 1 - 1e-12))
        dirs = g / np.linalg.norm(g, axis=1, keepdims=True)
    lo, hi = S.bbox
    reach = float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))
    pts = []
    for v in dirs:
        a, b = 0.0, reach
        if S.psi(S.center + b * v) <= 0:
            continue
        for _ in range(200):
            m = 0.5 * (a + b)
            if S.psi(S.center + m * v) <= 0:
                a = m
            else:
                b = m
            if b - a < 1e-15:
                break
        pts.append(S.center + a * v)
    return np.array(pts)


def certify_constants(S: SublevelSet, sample_budget: int = 2048, raise_on_fail: bool = True) -> CertificationReport:
    """Sample the boundary shell and the interior and test the declared constants."""
    lo, hi = (np.asarray(b, dtype=float) for b in S.bbox)
    bpts = boundary_points(S, max(8, sample_budget // 8))
    cloud = _sample_box(lo, hi, sample_budget, seed_skip=1)
    psis = np.array([S.psi(p) for p in cloud])
    inside = cloud[psis <= 0]
    shell = cloud[np.abs(psis) <= S.boundary_tol]
    bset = np.vstack([bpts, shell]) if len(shell) else bpts

    bgrad = np.array([np.linalg.norm(S.grad_psi(p)) for p in bset])
    imin = int(np.argmin(bgrad))
    igrad = np.array([np.linalg.norm(S.grad_psi(p)) for p in inside]) if len(inside) else np.zeros(0)
    allpts = np.vstack([inside, bset])
    allgrad = np.concatenate([igrad, bgrad])
    hnorm = max(float(np.linalg.norm(S.hess_psi(p), 2)) for p in allpts)

    # largest eps with psi < -eps wherever the gradient drops to eta or below
    low = allgrad <= S.eta
    eps = float(-max(S.psi(p) for p in allpts[low])) if np.any(low) else math.inf

    passed = bool(bgrad[imin] > 2 * S.eta)
    rep = CertificationReport(
        passed=passed, min_boundary_grad=float(bgrad[imin]), eps_estimate=eps,
        Mbar_psi_empirical=float(allgrad.max()), M_psi_empirical=0.5 * hnorm,
        n_boundary=len(bset), n_interior=len(inside),
        witness=None if passed else bset[imin].copy(),
    )
    if not passed and raise_on_fail:
        raise CertificationError(
            f"||grad psi||={bgrad[imin]:.6g} <= 2*eta={2 * S.eta:.6g} at boundary point {bset[imin]}",
            bset[imin], rep)
    return rep
