"""Projected limited-memory quasi-Newton method with Armijo backtracking.

Constraints are a product of blocks (boxes, balls, endpoint sets), each with
an exact projection and normal-cone generators. Search directions live on
the face of the currently active constraints; steps follow the projection arc.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class MaxIterations(RuntimeError):
    def __init__(self, message, z, f):
        super().__init__(message)
        self.z, self.f = z, f


class LineSearchFailure(RuntimeError):
    def __init__(self, message, z, f):
        super().__init__(message)
        self.z, self.f = z, f


@dataclass(frozen=True)
class Block:
    """A slice of the decision vector constrained to ``cset`` (project + normal_generators)."""

    start: int
    stop: int
    cset: object


class ProductConstraint:
    def __init__(self, blocks, size: int):
        self.blocks = list(blocks)
        self.size = size

    def project(self, z):
        z = np.array(z, dtype=float)
        for b in self.blocks:
            z[b.start:b.stop] = b.cset.project(z[b.start:b.stop])
        return z

    def reduce(self, z, v, g):
        """Remove from v its components along active normals that g pushes against."""
        v = np.array(v, dtype=float)
        for b in self.blocks:
            G = b.cset.normal_generators(z[b.start:b.stop])
            if G.shape[1] == 0:
                continue
            gb = g[b.start:b.stop]
            act = G[:, (G.T @ gb) < 0]
            if act.shape[1] == 0:
                continue
            if act.shape[1] == 1:
                Q = act / np.linalg.norm(act)
            else:
                Q, R = np.linalg.qr(act)
                Q = Q[:, np.abs(np.diag(R)) > 1e-12]
            vb = v[b.start:b.stop]
            v[b.start:b.stop] = vb - Q @ (Q.T @ vb)
        return v

    def stationarity(self, z, g) -> float:
        """||z - P(z - g)||_inf."""
        return float(np.max(np.abs(z - self.project(z - g)))) if len(z) else 0.0


@dataclass
class OptimResult:
    z: np.ndarray
    f: float
    g: np.ndarray
    pg_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a, s, y))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for rho, a, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def projected_lbfgs(fun_grad, z0, constraint: ProductConstraint, kkt_tol: float = 1e-6,
                    max_iter: int = 500, memory: int = 10, c1: float = 1e-4, max_step0: float = 0.1,
                    raise_on_maxiter: bool = True) -> OptimResult:
    """Minimize a smooth function over a product of convex blocks.

    ``fun_grad(z)`` returns (f, g) and may return f = inf for infeasible
    states, which the line search treats as a rejected trial.
    Trace rows are (iteration, f, projected-gradient norm, step length).
    """
    z = constraint.project(z0)
    f, g = fun_grad(z)
    if not math.isfinite(f):
        raise LineSearchFailure("objective is not finite at the initial point", z, f)
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    trace = []
    it = 0
    while True:
        pg = constraint.stationarity(z, g)
        if pg <= kkt_tol:
            trace.append((it, f, pg, 0.0))
            return OptimResult(z, f, g, pg, it, True, trace)
        if it >= max_iter:
            trace.append((it, f, pg, 0.0))
            if raise_on_maxiter:
                raise MaxIterations(f"no convergence in {max_iter} iterations (pg={pg:.3e})", z, f)
            return OptimResult(z, f, g, pg, it, False, trace)

        accepted = None
        for use_qn in ((True, False) if S else (False,)):
            gr = constraint.reduce(z, g, g)
            if use_qn:
                d = -_two_loop(gr, S, Y)
                d = constraint.reduce(z, d, g)
                if not g @ d < 0:
                    continue
                step = 1.0
            else:
                d = -gr
                if not np.any(d):
                    d = -g
                step = min(1.0, max_step0 / float(np.max(np.abs(d))))
            for _ in range(60):
                zt = constraint.project(z + step * d)
                dec = float(g @ (zt - z))
                if dec >= 0 and np.array_equal(zt, z):
                    break
                ft, gt = fun_grad(zt)
                if math.isfinite(ft) and ft <= f + c1 * min(dec, 0.0) and ft <= f:
                    accepted = (zt, ft, gt, step)
                    break
                step *= 0.5
            if accepted is not None:
                break
            S.clear()
            Y.clear()
        if accepted is None:
            trace.append((it, f, pg, 0.0))
            raise LineSearchFailure(f"line search failed at iteration {it} (pg={pg:.3e})", z, f)
        zt, ft, gt, step = accepted
        s, y = zt - z, gt - g
        if s @ y > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            S.append(s)
            Y.append(y)
        trace.append((it, f, pg, step))
        z, f, g = zt, ft, gt
        it += 1
