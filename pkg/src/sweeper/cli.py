"""Command-line front end: ``sweeper <command> <scenario> [flags]``.

Commands: simulate, oracle, sweep, solve, check-nc, certify. Artifacts go to
``<out>/<scenario name>/``; the output root is ``--out``, else the
SWEEPER_OUT environment variable, else ``./out``. Tolerances are overridden
with ``--tol.<name> <value>`` (or ``--tol.<name>=<value>``).

Exit status: 0 on success or PASS, 1 on a FAIL verdict, 2 on errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
COMMANDS = ("simulate", "oracle", "sweep", "solve", "check-nc", "certify")


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sweeper", description="Penalized sweeping-process simulation and control.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("scenario", help="scenario JSON path, or the name of a shipped scenario")
    p.add_argument("--gamma", type=float, help="single penalty parameter")
    p.add_argument("--gammas", help="comma-separated ascending penalty parameters")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--mode", choices=("nc", "plain"), help="solve mode (default: nc when a reference pair exists)")
    p.add_argument("--grid", type=int, help="number of control nodes")
    p.add_argument("--solution", help="solution JSON written by 'solve' (for check-nc)")
    p.add_argument("--h", type=float, help="catching-up step (default: tolerance oracle_h)")
    p.add_argument("--inward", action="store_true", help="simulate: start from the C(k)-shifted initial state")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    return p


def parse_tolerances(extra: list) -> dict:
    """Collect --tol.<name> flags from the arguments argparse did not consume."""
    from .scenario import DEFAULT_TOLERANCES, INT_TOLERANCES

    tol, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--tol."):
            raise UsageError(f"unrecognized argument {arg}")
        name, eq, value = arg[6:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"{arg} needs a value")
            value = extra[i + 1]
            i += 1
        if name not in DEFAULT_TOLERANCES:
            raise UsageError(f"unknown tolerance {name!r}")
        tol[name] = int(value) if name in INT_TOLERANCES else float(value)
        i += 1
    return tol


def _gammas(args, scenario, solve=False):
    if args.gamma is not None and args.gammas is not None:
        raise UsageError("--gamma and --gammas are mutually exclusive")
    if args.gamma is not None:
        return (args.gamma,)
    if args.gammas is not None:
        return tuple(float(g) for g in args.gammas.split(","))
    if solve and scenario.solve_gammas is not None:
        return scenario.solve_gammas
    return scenario.schedule.gammas


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- commands -----------------------------------------------------------------

def cmd_simulate(args, sc, out: Path) -> int:
    from .dynamics import StepControl, check_bounds, integrate_penalized
    from .geometry import PenaltySchedule, in_Ck, inward_start

    gammas = _gammas(args, sc)
    tol = sc.tolerances
    step = StepControl(atol=tol["atol"], n_out=tol["n_out"], invariance_tol=tol["invariance_tol"])
    sched = PenaltySchedule(gammas, sc.system.Mbar, sc.set.eta)
    u = sc.control if args.grid is None else sc.control.resample(np.linspace(0.0, 1.0, args.grid))
    ok = True
    summary = {}
    for gamma, alpha, rho in zip(sched.gammas, sched.alphas, sched.rhos):
        x0 = inward_start(sc.set, sc.x0, rho) if args.inward else sc.x0
        run = integrate_penalized(sc.system, gamma, x0, u, step)
        rep = check_bounds(run, sc.system, bool(in_Ck(sc.set, alpha, x0)), tol["report_tol"])
        tag = f"gamma{gamma:g}"
        _write(out / f"trajectory_{tag}.csv", run.to_csv())
        summary[tag] = {"bounds": rep.as_dict(), "max_psi": float(run.psi.max()),
                        "invariance": "PASS" if run.psi.max() <= tol["invariance_tol"] else "FAIL",
                        "steps": run.diagnostics}
        ok = ok and rep.passed and run.psi.max() <= tol["invariance_tol"]
        if not args.no_plots:
            from .plotting import plot_run

            plot_run(run, sc.set, out / f"trajectory_{tag}.png", f"{sc.name}, gamma={gamma:g}")
        _log(f"{sc.name} gamma={gamma:g}: max psi={run.psi.max():.3e}, bounds {'PASS' if rep.passed else 'FAIL'}")
    _write(out / "simulate.json", _dump(summary))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_oracle(args, sc, out: Path) -> int:
    from .oracle import catching_up, feasibility_residual, multiplier_from_trajectory, oracle_csv

    h = args.h if args.h is not None else sc.tolerances["oracle_h"]
    traj = catching_up(sc.system, sc.x0, sc.control, h)
    mult = multiplier_from_trajectory(sc.system, traj, sc.control)
    excess = mult.bound_excess(sc.system)
    ok = excess <= sc.tolerances["report_tol"]
    _write(out / "oracle.csv", oracle_csv(traj, mult))
    _write(out / "oracle.json", _dump({
        "h": h, "max_xi": float(mult.xi.max()), "xi_bound": sc.system.Mbar / (2 * sc.set.eta),
        "bound": "PASS" if ok else "FAIL",
        "feasibility_residual": feasibility_residual(sc.system, traj, sc.control, mult),
        "contact_nodes": int(mult.support_mask.sum()),
    }))
    if not args.no_plots:
        from .plotting import plot_oracle

        plot_oracle(traj, mult, out / "oracle.png", f"{sc.name}, catching-up h={h:g}")
    _log(f"{sc.name}: max xi={mult.xi.max():.6g} (bound {'PASS' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_FAIL


def reference_for(sc, n_out):
    from .convergence import analytic_reference, oracle_reference

    if sc.analytic_reference is not None:
        return analytic_reference(sc.analytic_reference, sc.system, sc.x0, n_out)
    return oracle_reference(sc.system, sc.x0, sc.control, n_out, sc.tolerances["oracle_h"])


def cmd_sweep(args, sc, out: Path) -> int:
    from .convergence import gamma_sweep
    from .dynamics import StepControl
    from .geometry import PenaltySchedule

    tol = sc.tolerances
    sched = PenaltySchedule(_gammas(args, sc), sc.system.Mbar, sc.set.eta)
    ref = reference_for(sc, tol["n_out"])
    step = StepControl(atol=tol["atol"], n_out=tol["n_out"], invariance_tol=tol["invariance_tol"])
    rep = gamma_sweep(sc.system, sched, sc.x0, sc.control, ref, tol["sweep_tol"], step)
    _write(out / "sweep.csv", rep.to_csv())
    _write(out / "sweep.json", rep.to_json() + "\n")
    if not args.no_plots:
        from .plotting import plot_sweep

        plot_sweep(rep, out / "sweep.png", f"{sc.name}: {rep.verdict}")
    _log(f"{sc.name}: sweep {rep.verdict} ({rep.provenance})")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_solve(args, sc, out: Path) -> int:
    from .geometry import PenaltySchedule
    from .ocp import continuation_solve

    if sc.problem is None:
        raise UsageError(f"scenario {sc.name!r} has no optimal control problem")
    mode = args.mode or ("nc" if sc.problem.reference is not None else "plain")
    bootstrapped = mode == "nc" and sc.problem.reference is None
    tol = sc.tolerances
    sched = PenaltySchedule(_gammas(args, sc, solve=True), sc.system.Mbar, sc.set.eta)
    cr = continuation_solve(sc.problem, sc.system, sched, mode, cont_tol=tol["cont_tol"],
                            n_nodes=args.grid or tol["grid"], kkt_tol=tol["kkt_tol"],
                            endpoint_tol=tol["endpoint_tol"], oracle_h=tol["oracle_h"])
    final = cr.final
    _write(out / "sol.json", final.bundle_json(sc.name) + "\n")
    _write(out / "continuation.csv", cr.to_csv())
    _write(out / "trace.csv", final.trace_csv())
    _write(out / "solution_trajectory.csv", final.run.to_csv())
    _write(out / "solve.json", _dump({"mode": mode, "gammas": list(sched.gammas), "J": final.J, "g": final.g_value,
                                      "kkt": final.kkt, "continuation": cr.summary(),
                                      "reference": "bootstrapped" if bootstrapped else "scenario"}))
    if not args.no_plots:
        from .plotting import plot_solution

        plot_solution(final, sc.set, out / "solution.png", f"{sc.name} ({mode}), gamma={final.gamma:g}")
    _log(f"{sc.name}: J={final.J:.8g}, g={final.g_value:.8g}, continuation {'converged' if cr.converged else 'open'}")
    return EXIT_OK if final.kkt["converged"] else EXIT_FAIL


def cmd_check_nc(args, sc, out: Path) -> int:
    from .model import ControlPath
    from .nc import check_candidate, nu_density
    from .oracle import catching_up
    from .ocp import transcription_from_bundle

    if args.solution is None:
        raise UsageError("check-nc needs --solution")
    if sc.problem is None:
        raise UsageError(f"scenario {sc.name!r} has no optimal control problem")
    bundle = json.loads(Path(args.solution).read_text())
    tr, z = transcription_from_bundle(sc.system, sc.problem, bundle)
    run = tr.run(z)
    u = tr.control(z)
    ubar = ControlPath(tr.grid, tr.u_center.copy())
    xbar = None
    ref = sc.problem.reference
    if ref is not None:
        tb = catching_up(sc.system, ref.x0, ref.u, sc.tolerances["oracle_h"])
        xbar = np.stack([np.interp(run.t, tb.t, tb.x[:, i]) for i in range(sc.n)], axis=1)
    report, arc = check_candidate(sc.system, sc.problem.g, run, u, ubar, bundle["x0_center"], tr.C0set, tr.C1set,
                                  xbar, sc.tolerances["nc_tol"])
    _write(out / "nc_report.json", report.to_json() + "\n")
    _write(out / "adjoint.csv", arc.to_csv())
    if not args.no_plots:
        from .plotting import plot_adjoint

        plot_adjoint(arc, nu_density(sc.system, run, arc), out / "adjoint.png", f"{sc.name}: {report.verdicts}")
    _log(f"{sc.name}: necessary conditions {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_certify(args, sc, out: Path) -> int:
    from .geometry import certify_constants
    from .scenario import check_mbar

    rep = certify_constants(sc.set, raise_on_fail=False)
    worst = check_mbar(sc.system)
    _write(out / "certify.json", _dump({**rep.as_dict(), "f_phi_max_sampled": worst, "Mbar": sc.system.Mbar}))
    _log(f"{sc.name}: certification {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


HANDLERS = {"simulate": cmd_simulate, "oracle": cmd_oracle, "sweep": cmd_sweep, "solve": cmd_solve,
            "check-nc": cmd_check_nc, "certify": cmd_certify}


def output_root(flag) -> Path:
    return Path(flag or os.environ.get("SWEEPER_OUT") or "out")


def dispatch(command: str, scenario, args) -> int:
    """Run one command on a loaded scenario; returns the exit status."""
    if command not in HANDLERS:
        raise UsageError(f"unknown command {command!r}")
    out = output_root(args.out) / scenario.name
    out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[command](args, scenario, out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    t0 = time.perf_counter()
    try:
        from .geometry import CertificationError
        from .scenario import load_scenario

        tol = parse_tolerances(extra)
        if args.command != "check-nc" and args.solution is not None:
            raise UsageError("--solution only applies to check-nc")
        try:
            sc = load_scenario(args.scenario, certify_set=True)
        except CertificationError as exc:
            _log(f"certification failed: {exc}")
            return EXIT_FAIL if args.command == "certify" else EXIT_ERROR
        if tol:
            sc = sc.with_tolerances(**tol)
        status = dispatch(args.command, sc, args)
    except Exception as exc:  # noqa: BLE001
        _log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_ERROR
    _log(f"done in {time.perf_counter() - t0:.2f} s")
    return status


if __name__ == "__main__":
    sys.exit(main())
