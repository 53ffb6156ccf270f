"""Ground truth for the sweeping dynamics: catching-up projections and multiplier recovery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory, trajectory_csv
from .geometry import SublevelSet, prox_radius
from .model import ControlPath, System


class ProjectionFailure(RuntimeError):
    pass


class GridMismatch(ValueError):
    pass


def _boundary_scaling_point(S: SublevelSet, y):
    """Point of the segment [center, y] on the boundary, by bisection."""
    c = S.center
    a, b = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (a + b)
        if S.psi(c + mid * (y - c)) <= 0:
            a = mid
        else:
            b = mid
        if b - a < 1e-16:
            break
    return c + a * (y - c)


def project(S: SublevelSet, y, tol: float = 1e-13, maxiter: int = 100) -> np.ndarray:
    """Euclidean projection onto C.

    Closed form for intervals and balls; otherwise damped Newton on the KKT
    system x = y - lam grad psi(x), psi(x) = 0.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if S.psi(y) <= 0:
        return y.copy()
    if S.shape_tag in ("interval", "ball"):
        c = np.asarray(S.params["center"], dtype=float)
        r = S.params["radius"]
        d = y - c
        return c + d * (r / np.linalg.norm(d))
    n = len(y)
    x = _boundary_scaling_point(S, y)
    g = S.grad_psi(x)
    lam = max(float((y - x) @ g / (g @ g)), 0.0)

    def residual(x, lam):
        return np.concatenate([x - y + lam * S.grad_psi(x), [S.psi(x)]])

    R = residual(x, lam)
    for _ in range(maxiter):
        rn = float(np.linalg.norm(R))
        if rn <= tol * (1.0 + float(np.linalg.norm(y))):
            return x
        g = S.grad_psi(x)
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = np.eye(n) + lam * S.hess_psi(x)
        K[:n, n] = g
        K[n, :n] = g
        step = np.linalg.solve(K, -R)
        t = 1.0
        for _ in range(40):
            xn, ln = x + t * step[:n], lam + t * step[n]
            Rn = residual(xn, ln)
            if np.all(np.isfinite(Rn)) and np.linalg.norm(Rn) < rn:
                break
            t *= 0.5
        else:
            raise ProjectionFailure(f"projection of {y} stalled at residual {rn:.3e}")
        x, lam, R = xn, ln, Rn
    raise ProjectionFailure(f"projection of {y} did not converge")


def project_batch(S: SublevelSet, Y: np.ndarray) -> np.ndarray:
    """Row-wise projection; vectorized for intervals, balls and ellipses."""
    Y = np.asarray(Y, dtype=float)
    if S.shape_tag in ("interval", "ball"):
        c = np.asarray(S.params["center"], dtype=float)
        r = S.params["radius"]
        d = Y - c
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(nrm > r, r / np.maximum(nrm, 1e-300), 1.0)
        return c + d * scale
    if S.shape_tag == "ellipse":
        c = np.asarray(S.params["center"], dtype=float)
        a2 = np.asarray(S.params["semi_axes"], dtype=float) ** 2
        d = Y - c
        outside = np.sum(d**2 / a2, axis=-1) > 1.0
        # x_i = d_i a_i^2 / (a_i^2 + lam); solve sum x_i^2 / a_i^2 = 1 for lam >= 0
        lam = np.zeros(d.shape[:-1])
        for _ in range(100):
            den = a2 + lam[..., None]
            phi = np.sum(d**2 * a2 / den**2, axis=-1) - 1.0
            dphi = -2.0 * np.sum(d**2 * a2 / den**3, axis=-1)
            lam = np.where(outside, np.maximum(lam - phi / dphi, 0.0), 0.0)
            if np.all(np.abs(np.where(outside, phi, 0.0)) < 1e-15):
                break
        return np.where(outside[..., None], c + d * a2 / (a2 + lam[..., None]), Y)
    return np.array([project(S, y) for y in Y.reshape(-1, Y.shape[-1])]).reshape(Y.shape)


def central_velocities(x: np.ndarray, h: float) -> np.ndarray:
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) / (2 * h)
    v[0] = (x[1] - x[0]) / h
    v[-1] = (x[-1] - x[-2]) / h
    return v


def catching_up(system: System, x0, u: ControlPath, h: float = 1e-4) -> Trajectory:
    """x_{j+1} = proj_C(x_j + h f_Phi(x_j, u(t_j))) on a uniform grid of step h."""
    S = system.set
    if h > prox_radius(S) / (2.0 * system.Mbar):
        raise ValueError(f"h={h} exceeds prox_radius/(2 Mbar)={prox_radius(S) / (2 * system.Mbar):.4g}")
    N = int(round(1.0 / h))
    if abs(N * h - 1.0) > 1e-12:
        raise ValueError("1/h must be an integer")
    t = np.linspace(0.0, 1.0, N + 1)
    U = u.sample(t)
    x = np.empty((N + 1, system.n))
    x[0] = np.atleast_1d(np.asarray(x0, dtype=float))
    if S.psi(x[0]) > S.boundary_tol:
        raise ValueError("x0 must lie in C")
    closed = S.shape_tag in ("interval", "ball")
    for j in range(N):
        y = x[j] + h * system.f_phi(x[j], U[j])
        x[j + 1] = project_batch(S, y) if closed else project(S, y)
    return Trajectory(t, x, central_velocities(x, h))


def catching_up_batch(system: System, x0, controls: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Terminal states of catching-up runs for a batch of controls.

    ``controls`` has shape (K, n_nodes, m) on a uniform node grid; returns (K, n).
    Only for fields whose x-Jacobian is constant (affine family).
    """
    S = system.set
    K, nn, m = controls.shape
    N = int(round(1.0 / h))
    grid = np.linspace(0.0, 1.0, nn)
    Ax = system.field.A - system.potential.Q
    bx = system.field.b - system.potential.c
    B = system.field.B
    x = np.tile(np.atleast_1d(np.asarray(x0, dtype=float)), (K, 1))
    for j in range(N):
        t = j * h
        i = min(int(np.searchsorted(grid, t, side="right")) - 1, nn - 2)
        th = (t - grid[i]) / (grid[i + 1] - grid[i])
        uj = (1 - th) * controls[:, i] + th * controls[:, i + 1]
        x = project_batch(S, x + h * (x @ Ax.T + uj @ B.T + bx))
    return x


@dataclass(frozen=True)
class MultiplierPath:
    grid: np.ndarray
    xi: np.ndarray
    support_mask: np.ndarray

    def bound_excess(self, system: System) -> float:
        return float(self.xi.max() - system.Mbar / (2.0 * system.set.eta))

    def contact_interior(self) -> np.ndarray:
        """Mask nodes whose neighbours are masked too; excludes the contact switches."""
        m = self.support_mask
        out = m.copy()
        out[1:] &= m[:-1]
        out[:-1] &= m[1:]
        return out


def multiplier_from_trajectory(system: System, traj: Trajectory, u: ControlPath,
                               mask_tol: float | None = None) -> MultiplierPath:
    """xi = ||x' - f_Phi|| / ||grad psi|| on boundary nodes, zero elsewhere."""
    S = system.set
    mask_tol = 10 * S.boundary_tol if mask_tol is None else mask_tol
    U = u.sample(traj.t)
    xi = np.zeros(len(traj.t))
    mask = np.zeros(len(traj.t), dtype=bool)
    for i, (x, v, uu) in enumerate(zip(traj.x, traj.xdot, U)):
        if abs(S.psi(x)) > mask_tol:
            continue
        mask[i] = True
        gn = float(np.linalg.norm(S.grad_psi(x)))
        if gn <= S.eta:
            from .geometry import DegenerateGradientError

            raise DegenerateGradientError(f"||grad psi||={gn} <= eta at t={traj.t[i]}")
        xi[i] = float(np.linalg.norm(v - system.f_phi(x, uu))) / gn
    return MultiplierPath(traj.t.copy(), xi, mask)


def feasibility_residual(system: System, traj: Trajectory, u: ControlPath, mult: MultiplierPath) -> float:
    """max_i ||x'_i - f_Phi(x_i, u_i) + xi_i grad psi(x_i)||."""
    if len(mult.grid) != len(traj.t) or not np.array_equal(mult.grid, traj.t):
        raise GridMismatch("trajectory and multiplier grids differ")
    S = system.set
    U = u.sample(traj.t)
    res = [np.linalg.norm(v - system.f_phi(x, uu) + k * S.grad_psi(x))
           for x, v, uu, k in zip(traj.x, traj.xdot, U, mult.xi)]
    return float(max(res))


def oracle_csv(traj: Trajectory, mult: MultiplierPath) -> str:
    return trajectory_csv(traj, {"xi_oracle": mult.xi, "on_boundary": mult.support_mask.astype(int)})
