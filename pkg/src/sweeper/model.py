"""Vector fields, potentials, control sets and piecewise-linear controls."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .geometry import SublevelSet


@dataclass(frozen=True)
class AffineField:
    """f(x, u) = A x + B u + b.

    Covers the three built-in kinds: ``constant`` (A = 0, no control),
    ``linear`` (no control) and ``control_affine``.
    """

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    kind: str = "control_affine"

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def __call__(self, x, u):
        return self.A @ x + self.B @ u + self.b

    def jac_x(self, x, u):
        return self.A

    def jac_u(self, x, u):
        return self.B

    @classmethod
    def from_spec(cls, spec: dict, n: int, m: int) -> "AffineField":
        kind = spec.get("kind", "constant")
        zA, zB = np.zeros((n, n)), np.zeros((n, m))
        if kind == "constant":
            return cls(zA, zB, _vec(spec["value"], n), kind)
        if kind == "linear":
            return cls(_mat(spec["A"], n, n), zB, _vec(spec.get("b", [0.0] * n), n), kind)
        if kind == "control_affine":
            A = _mat(spec["A"], n, n) if "A" in spec else zA
            B = _mat(spec["B"], n, m) if "B" in spec else np.eye(n, m)
            return cls(A, B, _vec(spec.get("b", [0.0] * n), n), kind)
        raise ValueError(f"unknown field kind {kind!r}")

    def to_spec(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.b.tolist()}
        if self.kind == "linear":
            return {"kind": "linear", "A": self.A.tolist(), "b": self.b.tolist()}
        return {"kind": "control_affine", "A": self.A.tolist(), "B": self.B.tolist(), "b": self.b.tolist()}


@dataclass(frozen=True)
class QuadraticPotential:
    """Phi(x) = 1/2 x^T Q x + c^T x; Q = 0, c = 0 is the indicator case."""

    Q: np.ndarray
    c: np.ndarray

    @classmethod
    def zero(cls, n: int) -> "QuadraticPotential":
        return cls(np.zeros((n, n)), np.zeros(n))

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.Q) or np.any(self.c))

    def value(self, x):
        return 0.5 * x @ self.Q @ x + self.c @ x

    def grad(self, x):
        return self.Q @ x + self.c

    def hess(self, x):
        return self.Q

    @classmethod
    def from_spec(cls, spec, n: int) -> "QuadraticPotential":
        if spec in (None, "zero") or spec.get("kind", "zero") == "zero":
            return cls.zero(n)
        if spec["kind"] == "quadratic":
            return cls(_mat(spec.get("Q", np.zeros((n, n)).tolist()), n, n), _vec(spec.get("c", [0.0] * n), n))
        raise ValueError(f"unknown potential kind {spec.get('kind')!r}")

    def to_spec(self) -> dict:
        if self.is_zero:
            return {"kind": "zero"}
        return {"kind": "quadratic", "Q": self.Q.tolist(), "c": self.c.tolist()}


def _vec(v, n):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.shape != (n,):
        raise ValueError(f"expected a vector of length {n}, got shape {a.shape}")
    return a


def _mat(v, r, c):
    a = np.atleast_2d(np.asarray(v, dtype=float))
    if a.shape != (r, c):
        raise ValueError(f"expected a {r}x{c} matrix, got shape {a.shape}")
    return a


# -- control sets -----------------------------------------------------------

class ControlSet:
    """Closed convex U with exact projection, support function and normal cone generators."""

    kind = "abstract"

    def project(self, u):
        raise NotImplementedError

    def contains(self, u, tol=1e-12) -> bool:
        return float(np.linalg.norm(self.project(u) - u)) <= tol

    def support(self, s) -> float:
        raise NotImplementedError

    def normal_generators(self, u, tol=1e-9) -> np.ndarray:
        """Columns spanning the normal cone at u (empty when u is interior)."""
        raise NotImplementedError

    def at(self, t) -> "ControlSet":
        return self


@dataclass(frozen=True)
class Box(ControlSet):
    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def project(self, u):
        return np.clip(u, self.lo, self.hi)

    def support(self, s):
        return float(np.sum(np.where(s >= 0, s * self.hi, s * self.lo)))

    def normal_generators(self, u, tol=1e-9):
        cols = []
        for i in range(len(self.lo)):
            e = np.zeros(len(self.lo))
            if u[i] >= self.hi[i] - tol:
                e[i] = 1.0
                cols.append(e)
            elif u[i] <= self.lo[i] + tol:
                e[i] = -1.0
                cols.append(e)
        return np.array(cols).T if cols else np.zeros((len(self.lo), 0))

    def to_spec(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class Ball(ControlSet):
    center: np.ndarray
    radius: float
    kind = "ball"

    def project(self, u):
        d = u - self.center
        r = float(np.linalg.norm(d))
        return u.copy() if r <= self.radius else self.center + d * (self.radius / r)

    def support(self, s):
        return float(self.center @ s + self.radius * np.linalg.norm(s))

    def normal_generators(self, u, tol=1e-9):
        d = u - self.center
        r = float(np.linalg.norm(d))
        if r >= self.radius - tol and r > 0:
            return (d / r)[:, None]
        return np.zeros((len(u), 0))

    def to_spec(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class PiecewiseConstantSet(ControlSet):
    """U(t) = sets[i] for breaks[i] <= t < breaks[i+1]."""

    breaks: tuple
    sets: tuple
    kind = "piecewise"

    def at(self, t):
        i = bisect.bisect_right(self.breaks, t) - 1
        return self.sets[min(max(i, 0), len(self.sets) - 1)]

    def to_spec(self):
        return {"kind": "piecewise", "breaks": list(self.breaks), "sets": [s.to_spec() for s in self.sets]}


def control_set_from_spec(spec: dict, m: int) -> ControlSet:
    kind = spec.get("kind", "box")
    if kind == "box":
        return Box(_vec(spec["lo"], m), _vec(spec["hi"], m))
    if kind == "ball":
        return Ball(_vec(spec.get("center", [0.0] * m), m), float(spec["radius"]))
    if kind == "piecewise":
        return PiecewiseConstantSet(tuple(float(b) for b in spec["breaks"]),
                                    tuple(control_set_from_spec(s, m) for s in spec["sets"]))
    raise ValueError(f"unknown control set kind {kind!r}")


# -- controls ---------------------------------------------------------------

class ControlPath:
    """A continuous piecewise-linear control on [0, 1] given by its nodes."""

    def __init__(self, grid, nodes):
        self.grid = np.asarray(grid, dtype=float)
        nodes = np.asarray(nodes, dtype=float)
        self.nodes = nodes.reshape(len(self.grid), -1)
        if self.grid[0] != 0.0 or self.grid[-1] != 1.0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("control grid must be strictly ascending from 0 to 1")
        self.slopes = np.diff(self.nodes, axis=0) / np.diff(self.grid)[:, None]
        self._grid_list = self.grid.tolist()

    @classmethod
    def constant(cls, value, n_nodes: int = 101) -> "ControlPath":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.linspace(0.0, 1.0, n_nodes), np.tile(v, (n_nodes, 1)))

    @classmethod
    def from_function(cls, fun, n_nodes: int = 101) -> "ControlPath":
        g = np.linspace(0.0, 1.0, n_nodes)
        return cls(g, np.array([np.atleast_1d(fun(t)) for t in g]))

    @property
    def m(self) -> int:
        return self.nodes.shape[1]

    def cell(self, t: float) -> int:
        i = bisect.bisect_right(self._grid_list, t) - 1
        return min(max(i, 0), len(self.grid) - 2)

    def __call__(self, t: float) -> np.ndarray:
        i = self.cell(t)
        return self.nodes[i] + (t - self.grid[i]) * self.slopes[i]

    def sample(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return np.stack([np.interp(times, self.grid, self.nodes[:, j]) for j in range(self.m)], axis=-1)

    def derivative(self, t: float) -> np.ndarray:
        return self.slopes[self.cell(t)]

    def seminorm(self) -> float:
        """||u'||_2, exact for piecewise-linear paths."""
        return float(np.sqrt(np.sum(self.slopes**2 * np.diff(self.grid)[:, None])))

    def w12_distance(self, other: "ControlPath") -> float:
        """sqrt(||u - v||_2^2 + ||u' - v'||_2^2) on a common refinement."""
        g = np.union1d(self.grid, other.grid)
        d = self.sample(g) - other.sample(g)
        h = np.diff(g)
        # exact L2 of a piecewise-linear difference
        l2 = np.sum(h / 3.0 * (d[:-1] ** 2 + d[:-1] * d[1:] + d[1:] ** 2).sum(axis=1))
        dd = np.diff(d, axis=0) / h[:, None]
        return float(np.sqrt(l2 + np.sum(dd**2 * h[:, None])))

    def resample(self, grid) -> "ControlPath":
        grid = np.asarray(grid, dtype=float)
        return ControlPath(grid, self.sample(grid))

    def admissible(self, U: ControlSet, tol: float = 1e-12) -> bool:
        return all(U.at(t).contains(u, tol) for t, u in zip(self.grid, self.nodes))

    def to_spec(self) -> dict:
        return {"grid": self.grid.tolist(), "nodes": self.nodes.tolist()}

    @classmethod
    def from_spec(cls, spec: dict, m: int) -> "ControlPath":
        if "constant" in spec:
            return cls.constant(_vec(spec["constant"], m), int(spec.get("n_nodes", 101)))
        return cls(spec["grid"], np.asarray(spec["nodes"], dtype=float).reshape(-1, m))

    def __eq__(self, other):
        return isinstance(other, ControlPath) and np.array_equal(self.grid, other.grid) and np.array_equal(
            self.nodes, other.nodes)


@dataclass(frozen=True)
class System:
    """Everything the dynamics needs: C, f, Phi, U and the bound Mbar of f_Phi."""

    set: SublevelSet
    field: AffineField
    potential: QuadraticPotential
    U: ControlSet
    Mbar: float
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.field.n

    @property
    def m(self) -> int:
        return self.field.m

    def f_phi(self, x, u) -> np.ndarray:
        return self.field(x, u) - self.potential.grad(x)

    def f_phi_jac_x(self, x, u) -> np.ndarray:
        return self.field.jac_x(x, u) - self.potential.hess(x)

    def f_phi_jac_u(self, x, u) -> np.ndarray:
        return self.field.jac_u(x, u)

    def fast_params(self):
        """Arrays for the compiled kernels, or None when psi is not a diagonal quadratic."""
        q = self.set.quadratic_weights()
        if q is None or not isinstance(self.field, AffineField) or not isinstance(self.potential, QuadraticPotential):
            return None
        c, w, level = q
        Ax = np.ascontiguousarray(self.field.A - self.potential.Q, dtype=float)
        bx = np.ascontiguousarray(self.field.b - self.potential.c, dtype=float)
        B = np.ascontiguousarray(self.field.B, dtype=float)
        return (np.ascontiguousarray(c, dtype=float), np.ascontiguousarray(w, dtype=float), float(level), Ax, B, bx)


def f_phi(system: System, x, u) -> np.ndarray:
    """f(x, u) - grad Phi(x)."""
    return system.f_phi(np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(u, float)))


def control_set_vertices(U: ControlSet, n_dirs: int = 64) -> np.ndarray:
    """Extreme points of a box, or boundary samples of a ball."""
    if isinstance(U, Box):
        m = len(U.lo)
        idx = np.array(np.meshgrid(*[[0, 1]] * m, indexing="ij")).reshape(m, -1).T
        return np.where(idx == 1, U.hi, U.lo)
    if isinstance(U, Ball):
        m = len(U.center)
        if m == 1:
            return np.array([U.center - U.radius, U.center + U.radius])
        th = 2 * np.pi * np.arange(n_dirs) / n_dirs
        return U.center + U.radius * np.stack([np.cos(th), np.sin(th)], axis=1)
    raise TypeError(f"no vertex sampler for {type(U).__name__}")
