"""PNG figures for the CLI reports (headless Agg backend, no timestamps in metadata)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}
STYLE = {"figure.dpi": 100, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3, "lines.linewidth": 1.2}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _boundary_curve(S, n=400):
    if S.dim != 2:
        return None
    th = np.linspace(0.0, 2 * np.pi, n)
    if S.shape_tag == "ball":
        c, r = np.asarray(S.params["center"]), S.params["radius"]
        return c + r * np.stack([np.cos(th), np.sin(th)], axis=1)
    if S.shape_tag == "ellipse":
        c, a = np.asarray(S.params["center"]), np.asarray(S.params["semi_axes"])
        return c + a * np.stack([np.cos(th), np.sin(th)], axis=1)
    from .geometry import boundary_points

    pts = boundary_points(S, n)
    return np.vstack([pts, pts[:1]])


def plot_run(run, S, path, title="") -> Path:
    """State components, psi and the penalty multiplier against time; phase plot in 2-D."""
    with plt.rc_context(STYLE):
        n = run.x.shape[1]
        ncols = 3 if n == 2 else 2
        fig, axes = plt.subplots(1, ncols, figsize=(4 * ncols, 3.2))
        ax = axes[0]
        for i in range(n):
            ax.plot(run.t, run.x[:, i], label=f"x_{i + 1}")
        ax.set_xlabel("t")
        ax.legend()
        ax = axes[1]
        ax.plot(run.t, run.xi, color="C3", label="xi")
        ax.set_xlabel("t")
        ax.legend(loc="upper left")
        ax2 = ax.twinx()
        ax2.plot(run.t, run.psi, color="C2", lw=0.8, label="psi")
        ax2.set_ylabel("psi")
        if n == 2:
            ax = axes[2]
            curve = _boundary_curve(S)
            if curve is not None:
                ax.plot(curve[:, 0], curve[:, 1], "k-", lw=0.8)
            ax.plot(run.x[:, 0], run.x[:, 1], "C0")
            ax.plot(*run.x[0], "o", color="C0", ms=4)
            ax.set_aspect("equal")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_oracle(traj, mult, path, title="") -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for i in range(traj.x.shape[1]):
            axes[0].plot(traj.t, traj.x[:, i], label=f"x_{i + 1}")
        axes[0].set_xlabel("t")
        axes[0].legend()
        axes[1].plot(mult.grid, mult.xi, color="C3")
        axes[1].set_xlabel("t")
        axes[1].set_ylabel("xi (recovered)")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_sweep(report, path, title="") -> Path:
    """Velocity and multiplier L2 errors and the state sup error against gamma."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        g = report.column("gamma")
        ax.loglog(g, report.column("l2_vel_err"), "o-", label="||x' - x*'||_2")
        if report.xi_metric == "L2":
            ax.loglog(g, report.column("l2_xi_err"), "s-", label="||xi - xi*||_2")
        ax.loglog(g, report.column("sup_state_err"), "^-", label="sup |x - x*|")
        ax.axhline(report.sweep_tol, color="k", lw=0.8, ls="--", label="tolerance")
        ax.set_xlabel("gamma")
        ax.legend()
        ax.set_title(title or report.verdict)
        return _save(fig, path)


def plot_solution(result, S, path, title="") -> Path:
    """Optimal control nodes, state and the objective trace of a solve."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        u = result.control
        for j in range(u.m):
            axes[0].plot(u.grid, u.nodes[:, j], label=f"u_{j + 1}")
        axes[0].set_xlabel("t")
        axes[0].legend()
        run = result.run
        if run.x.shape[1] == 2:
            curve = _boundary_curve(S)
            if curve is not None:
                axes[1].plot(curve[:, 0], curve[:, 1], "k-", lw=0.8)
            axes[1].plot(run.x[:, 0], run.x[:, 1])
            axes[1].set_aspect("equal")
        else:
            for i in range(run.x.shape[1]):
                axes[1].plot(run.t, run.x[:, i], label=f"x_{i + 1}")
            axes[1].set_xlabel("t")
            axes[1].legend()
        J = [row[3] for row in result.trace]
        axes[2].plot(np.arange(len(J)), J, ".-")
        axes[2].set_xlabel("iteration")
        axes[2].set_ylabel("J")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_adjoint(arc, nu, path, title="") -> Path:
    """Adjoint components p, q and the penalty estimate of the state-constraint measure."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for i in range(arc.p.shape[1]):
            axes[0].plot(arc.grid, arc.p[:, i], label=f"p_{i + 1}")
        for j in range(arc.q.shape[1]):
            axes[0].plot(arc.grid, arc.q[:, j], ls="--", label=f"q_{j + 1}")
        axes[0].set_xlabel("t")
        axes[0].legend()
        axes[1].plot(arc.grid, nu, color="C3")
        axes[1].set_xlabel("t")
        axes[1].set_ylabel("nu density")
        if title:
            fig.suptitle(title)
        return _save(fig, path)
