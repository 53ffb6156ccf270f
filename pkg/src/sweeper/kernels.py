"""Compiled kernels for the diagonal-quadratic / affine family.

psi(x) = sum w_i (x_i - c_i)^2 - level and f_Phi(x, u) = Ax x + B u + bx.
Every shipped scenario belongs to this family; other sets use the generic
Python path in ``dynamics``, which runs the same algorithm.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def eval_field(x, u, gamma, c, w, level, Ax, B, bx):
    """Penalized right-hand side F, its x-Jacobian J, psi and the weight xi."""
    n = x.shape[0]
    m = u.shape[0]
    psi = -level
    g = np.empty(n)
    for i in range(n):
        d = x[i] - c[i]
        psi += w[i] * d * d
        g[i] = 2.0 * w[i] * d
    gp = gamma * psi
    xi = math.inf if gp > 700.0 else gamma * math.exp(gp)
    F = np.empty(n)
    J = np.empty((n, n))
    for i in range(n):
        s = bx[i] - xi * g[i]
        for j in range(n):
            s += Ax[i, j] * x[j]
            J[i, j] = Ax[i, j] - xi * gamma * g[i] * g[j]
        for j in range(m):
            s += B[i, j] * u[j]
        F[i] = s
        J[i, i] -= xi * 2.0 * w[i]
    return F, J, psi, xi


@njit(cache=True)
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return math.sqrt(s)


@njit(cache=True)
def midpoint_solve(x, umid, h, gamma, c, w, level, Ax, B, bx, tol, maxiter):
    """Solve y = x + h F((x+y)/2, umid) by damped Newton; ok flag second."""
    n = x.shape[0]
    y = x.copy()
    F, J, psi, xi = eval_field(x, umid, gamma, c, w, level, Ax, B, bx)
    G = -h * F
    gnorm = _norm(G)
    for _ in range(maxiter):
        if not math.isfinite(gnorm):
            return y, False
        M = np.eye(n) - 0.5 * h * J
        step = np.linalg.solve(M, -G)
        lam = 1.0
        accepted = False
        for _ in range(30):
            y_new = y + lam * step
            F_new, J_new, psi, xi = eval_field(0.5 * (x + y_new), umid, gamma, c, w, level, Ax, B, bx)
            G_new = y_new - x - h * F_new
            gn = _norm(G_new)
            if math.isfinite(gn) and (gn < gnorm or gn <= tol * (1.0 + _norm(y_new))):
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            return y, False
        y = y_new
        J = J_new
        G = G_new
        gnorm = gn
        if lam * _norm(step) <= tol * (1.0 + _norm(y)):
            return y, True
    return y, False


@njit(cache=True)
def _control_at(t, ugrid, unodes):
    k = np.searchsorted(ugrid, t, side="right") - 1
    if k < 0:
        k = 0
    if k > ugrid.shape[0] - 2:
        k = ugrid.shape[0] - 2
    th = (t - ugrid[k]) / (ugrid[k + 1] - ugrid[k])
    return (1.0 - th) * unodes[k] + th * unodes[k + 1]


@njit(cache=True)
def integrate_adaptive(x0, ugrid, unodes, gamma, c, w, level, Ax, B, bx,
                       atol, rtol, h_max, h_min, newton_tol, newton_maxiter):
    """Step-doubling implicit midpoint with a dense-output check. Returns (T, X, status, n_acc, n_rej).

    status 0 = success, 1 = Newton failure, 2 = step underflow.
    """
    n = x0.shape[0]
    cap = 4096
    T = np.empty(cap)
    X = np.empty((cap, n))
    T[0] = 0.0
    X[0] = x0
    cnt = 1
    t = 0.0
    x = x0.copy()
    h = min(1e-2, 1.0 / gamma, h_max)
    n_acc = 0
    n_rej = 0
    bi = 1
    nb = ugrid.shape[0]
    while t < 1.0:
        while bi < nb - 1 and ugrid[bi] <= t + 1e-15:
            bi += 1
        brk = ugrid[bi]
        h_try = min(h, brk - t)
        hit = False
        if brk - t - h_try < 1e-12:
            h_try = brk - t
            hit = True
        full, ok = midpoint_solve(x, _control_at(t + 0.5 * h_try, ugrid, unodes), h_try, gamma,
                                  c, w, level, Ax, B, bx, newton_tol, newton_maxiter)
        half = full
        half1 = full
        if ok:
            hh = 0.5 * h_try
            half1, ok = midpoint_solve(x, _control_at(t + 0.5 * hh, ugrid, unodes), hh, gamma,
                                       c, w, level, Ax, B, bx, newton_tol, newton_maxiter)
            if ok:
                half, ok = midpoint_solve(half1, _control_at(t + 1.5 * hh, ugrid, unodes), hh, gamma,
                                          c, w, level, Ax, B, bx, newton_tol, newton_maxiter)
        if not ok:
            n_rej += 1
            h = 0.25 * h_try
            if h < h_min:
                return T[:cnt], X[:cnt], 1, n_acc, n_rej
            continue
        err = _norm(half - full) / 3.0
        if ok:
            # dense-output check: cubic Hermite midpoint must match the half-step state
            F0, J0, p0, x0i = eval_field(x, _control_at(t, ugrid, unodes), gamma, c, w, level, Ax, B, bx)
            F1, J1, p1, x1i = eval_field(half, _control_at(t + h_try, ugrid, unodes), gamma,
                                         c, w, level, Ax, B, bx)
            herm = 0.5 * (x + half) + 0.125 * h_try * (F0 - F1)
            e2 = _norm(herm - half1)
            if not math.isfinite(e2):
                e2 = math.inf
            if e2 > err:
                err = e2
        tol = atol + rtol * _norm(half)
        if err <= tol:
            t = brk if hit else t + h_try
            x = half
            if cnt == T.shape[0]:
                T2 = np.empty(2 * cnt)
                X2 = np.empty((2 * cnt, n))
                T2[:cnt] = T
                X2[:cnt] = X
                T = T2
                X = X2
            T[cnt] = t
            X[cnt] = x
            cnt += 1
            n_acc += 1
        else:
            n_rej += 1
        if err == 0.0:
            fac = 4.0
        else:
            fac = min(4.0, max(0.2, 0.9 * (tol / err) ** (1.0 / 3.0)))
        h = min(h_max, h_try * fac)
        if h < h_min:
            return T[:cnt], X[:cnt], 2, n_acc, n_rej
    return T[:cnt], X[:cnt], 0, n_acc, n_rej


@njit(cache=True)
def rhs_batch(times, X, ugrid, unodes, gamma, c, w, level, Ax, B, bx):
    N, n = X.shape
    out = np.empty((N, n))
    for k in range(N):
        F, J, psi, xi = eval_field(X[k], _control_at(times[k], ugrid, unodes), gamma, c, w, level, Ax, B, bx)
        out[k] = F
    return out


@njit(cache=True)
def solve_small(A, b):
    """Gaussian elimination with partial pivoting for small dense systems (b may be 2-D)."""
    n = A.shape[0]
    M = A.copy()
    if b.ndim == 1:
        R = b.copy().reshape(n, 1)
    else:
        R = b.copy()
    k = R.shape[1]
    for col in range(n):
        piv = col
        best = abs(M[col, col])
        for r in range(col + 1, n):
            if abs(M[r, col]) > best:
                best = abs(M[r, col])
                piv = r
        if piv != col:
            for j in range(n):
                tmp = M[col, j]
                M[col, j] = M[piv, j]
                M[piv, j] = tmp
            for j in range(k):
                tmp = R[col, j]
                R[col, j] = R[piv, j]
                R[piv, j] = tmp
        d = M[col, col]
        for r in range(col + 1, n):
            f = M[r, col] / d
            if f != 0.0:
                for j in range(col, n):
                    M[r, j] -= f * M[col, j]
                for j in range(k):
                    R[r, j] -= f * R[col, j]
    for col in range(n - 1, -1, -1):
        for j in range(k):
            s = R[col, j]
            for c in range(col + 1, n):
                s -= M[col, c] * R[c, j]
            R[col, j] = s / M[col, col]
    return R


@njit(cache=True)
def euler_solve(x, u, h, gamma, c, w, level, Ax, B, bx, tol, maxiter):
    """Solve y = x + h F(y, u) by damped Newton; ok flag second."""
    n = x.shape[0]
    y = x.copy()
    F, J, psi, xi = eval_field(y, u, gamma, c, w, level, Ax, B, bx)
    G = -h * F
    gnorm = _norm(G)
    for _ in range(maxiter):
        if not math.isfinite(gnorm):
            return y, False
        step = solve_small(np.eye(n) - h * J, -G)[:, 0]
        lam = 1.0
        accepted = False
        for _ in range(30):
            y_new = y + lam * step
            F_new, J_new, psi, xi = eval_field(y_new, u, gamma, c, w, level, Ax, B, bx)
            G_new = y_new - x - h * F_new
            gn = _norm(G_new)
            if math.isfinite(gn) and (gn < gnorm or gn <= tol * (1.0 + _norm(y_new))):
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            return y, False
        y = y_new
        J = J_new
        G = G_new
        gnorm = gn
        if lam * _norm(step) <= tol * (1.0 + _norm(y)):
            return y, True
    return y, False


@njit(cache=True)
def fixed_forward(x0, U_step, h, gamma, c, w, level, Ax, B, bx, newton_tol, newton_maxiter):
    """Uniform-step implicit Euler, y = x + h F(y, u_j).

    Returns (X, Ms, Ns, status): Ms[j] = dx_{j+1}/dx_j and Ns[j] = dx_{j+1}/du_j.
    """
    nsteps = U_step.shape[0]
    n = x0.shape[0]
    m = U_step.shape[1]
    X = np.empty((nsteps + 1, n))
    Ms = np.empty((nsteps, n, n))
    Ns = np.empty((nsteps, n, m))
    X[0] = x0
    for j in range(nsteps):
        y, ok = euler_solve(X[j], U_step[j], h, gamma, c, w, level, Ax, B, bx, newton_tol, newton_maxiter)
        if not ok:
            return X, Ms, Ns, j + 1
        X[j + 1] = y
        F, J, psi, xi = eval_field(y, U_step[j], gamma, c, w, level, Ax, B, bx)
        L = np.eye(n) - h * J
        Ms[j] = solve_small(L, np.eye(n))
        Ns[j] = solve_small(L, h * B)
    return X, Ms, Ns, 0


@njit(cache=True)
def fixed_backward(aN, Ms, Ns):
    """Reverse sweep: A[j] = dJ/dx_j through the dynamics, G[j] = dJ/du_mid_j."""
    nsteps = Ms.shape[0]
    n = aN.shape[0]
    A = np.empty((nsteps + 1, n))
    G = np.empty((nsteps, Ns.shape[2]))
    A[nsteps] = aN
    for j in range(nsteps - 1, -1, -1):
        G[j] = Ns[j].T @ A[j + 1]
        A[j] = Ms[j].T @ A[j + 1]
    return A, G


@njit(cache=True)
def jac_batch(times, X, ugrid, unodes, gamma, c, w, level, Ax, B, bx):
    N, n = X.shape
    out = np.empty((N, n, n))
    for k in range(N):
        F, J, psi, xi = eval_field(X[k], _control_at(times[k], ugrid, unodes), gamma, c, w, level, Ax, B, bx)
        out[k] = J
    return out


@njit(cache=True)
def adjoint_backward(As, hs, pT):
    """Backward implicit midpoint for p' = -A^T p; As[k], hs[k] describe step k, returns p at step starts."""
    K = As.shape[0]
    n = pT.shape[0]
    P = np.empty((K + 1, n))
    P[K] = pT
    for k in range(K - 1, -1, -1):
        At = As[k].T
        L = np.eye(n) - 0.5 * hs[k] * At
        R = np.eye(n) + 0.5 * hs[k] * At
        P[k] = solve_small(L, R @ P[k + 1])[:, 0]
    return P
