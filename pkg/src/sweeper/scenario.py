"""Scenario files: one JSON document per test problem.

Numbers may be written as JSON numbers or as decimal strings ("0.9",
"1e-4"); both are parsed with ``float`` to binary floating point. Missing
tolerances take the defaults in ``DEFAULT_TOLERANCES``.
"""

from __future__ import annotations

import copy
import functools
import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry
from .geometry import CertificationError, CertificationReport, PenaltySchedule, SublevelSet, certify_constants
from .model import (AffineField, ControlPath, ControlSet, QuadraticPotential, System, _vec,
                    control_set_from_spec, control_set_vertices)
from .ocp import MayerProblem

DEFAULT_TOLERANCES = {
    "atol": 1e-10,
    "report_tol": 1e-6,
    "sweep_tol": 0.05,
    "kkt_tol": 1e-6,
    "cont_tol": 1e-3,
    "adjoint_tol": 1e-3,
    "nc_tol": 1e-3,
    "boundary_tol": 1e-9,
    "endpoint_tol": 1e-6,
    "invariance_tol": 1e-8,
    "grid": 101,
    "n_out": 2001,
    "oracle_h": 1e-4,
}
INT_TOLERANCES = ("grid", "n_out")
DEFAULT_GAMMAS = (10.0, 100.0, 1000.0, 10000.0)

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_TEXT_KEYS = {"name", "provenance", "notes", "shape_tag", "kind", "factory", "analytic_reference", "mode"}


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` names the offending entry."""

    def __init__(self, message, field_name: str = ""):
        super().__init__(message)
        self.field = field_name


def _numbers(obj, key: str = ""):
    """Replace decimal strings by floats, leaving text fields alone."""
    if isinstance(obj, dict):
        return {k: _numbers(v, k) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_numbers(v, key) for v in obj]
    if isinstance(obj, str) and key not in _TEXT_KEYS and _NUMBER.match(obj.strip()):
        return float(obj)
    return obj


@dataclass
class Scenario:
    name: str
    system: System
    x0: np.ndarray
    control: ControlPath
    schedule: PenaltySchedule
    tolerances: dict
    problem: Optional[MayerProblem] = None
    analytic_reference: Optional[str] = None
    provenance: str = ""
    solve_gammas: Optional[tuple] = None
    certification: Optional[CertificationReport] = None
    spec: dict = field(default_factory=dict, repr=False)

    @property
    def set(self) -> SublevelSet:
        return self.system.set

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    def with_schedule(self, gammas) -> "Scenario":
        s = copy.copy(self)
        s.schedule = PenaltySchedule(tuple(float(g) for g in gammas), self.system.Mbar, self.set.eta)
        return s

    def with_tolerances(self, **tol) -> "Scenario":
        s = copy.copy(self)
        s.tolerances = {**self.tolerances, **tol}
        if "boundary_tol" in tol:
            S = replace(self.set, boundary_tol=float(tol["boundary_tol"]))
            s.system = replace(self.system, set=S)
        return s

    def to_spec(self) -> dict:
        d = {
            "name": self.name,
            "provenance": self.provenance,
            "dimension": {"n": self.n, "m": self.m},
            "set": geometry.to_spec(self.set),
            "field": self.system.field.to_spec(),
            "potential": self.system.potential.to_spec(),
            "Mbar": self.system.Mbar,
            "control": {"U": self.system.U.to_spec(), "default": self.control.to_spec()},
            "x0": self.x0.tolist(),
            "schedule": {"gammas": list(self.schedule.gammas)},
            "tolerances": dict(self.tolerances),
            "analytic_reference": self.analytic_reference,
        }
        if self.problem is not None:
            d["problem"] = self.problem.to_spec()
            if self.solve_gammas is not None:
                d["problem"]["gammas"] = list(self.solve_gammas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_spec(), indent=2, sort_keys=True)


def _require(spec: dict, key: str, where: str = ""):
    if key not in spec:
        raise ScenarioError(f"missing field {where + key!r}", where + key)
    return spec[key]


@functools.lru_cache(maxsize=64)
def _certify_cached(set_key: str) -> CertificationReport:
    return certify_constants(geometry.from_spec(json.loads(set_key)))


def certify(S: SublevelSet) -> CertificationReport:
    """certify_constants, memoized on the serialized set when it has one."""
    try:
        key = json.dumps(geometry.to_spec(S), sort_keys=True)
    except ValueError:
        return certify_constants(S)
    return _certify_cached(key)


def check_mbar(system: System, n_samples: int = 512) -> float:
    """max ||f_Phi|| over samples of C x U; raises ScenarioError above Mbar."""
    S = system.set
    lo, hi = (np.asarray(b, dtype=float) for b in S.bbox)
    pts = geometry._sample_box(lo, hi, n_samples, seed_skip=7)
    pts = pts[geometry.psi_batch(S, pts) <= 0]
    pts = np.vstack([pts, geometry.boundary_points(S, 32), S.center[None, :]])
    U = system.U
    sets = U.sets if hasattr(U, "sets") else (U,)
    us = np.vstack([np.vstack([control_set_vertices(s), _center(s)[None, :]]) for s in sets])
    worst, arg = 0.0, None
    for x in pts:
        for u in us:
            v = float(np.linalg.norm(system.f_phi(x, u)))
            if v > worst:
                worst, arg = v, (x, u)
    if worst > system.Mbar * (1 + 1e-12):
        raise ScenarioError(f"||f_Phi||={worst:.6g} exceeds Mbar={system.Mbar:g} at x={arg[0]}, u={arg[1]}", "Mbar")
    return worst


def _center(U: ControlSet) -> np.ndarray:
    return 0.5 * (U.lo + U.hi) if hasattr(U, "lo") else np.asarray(U.center, dtype=float)


def scenario_from_spec(spec: dict, certify_set: bool = True) -> Scenario:
    raw = copy.deepcopy(spec)
    spec = _numbers(spec)
    name = str(spec.get("name", "unnamed"))
    dim = _require(spec, "dimension")
    n = int(_require(dim, "n", "dimension."))
    m = int(_require(dim, "m", "dimension."))
    set_spec = _require(spec, "set")
    for key in ("shape_tag", "eta"):
        _require(set_spec, key, "set.")
    tol = {**DEFAULT_TOLERANCES, **spec.get("tolerances", {})}
    unknown = set(tol) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise ScenarioError(f"unknown tolerance {sorted(unknown)[0]!r}", "tolerances." + sorted(unknown)[0])
    for k in INT_TOLERANCES:
        tol[k] = int(tol[k])
    try:
        S = geometry.from_spec(set_spec)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"bad set description: {exc}", "set") from exc
    if S.dim != n:
        raise ScenarioError(f"set has dimension {S.dim}, expected {n}", "set")
    if tol["boundary_tol"] != S.boundary_tol:
        S = replace(S, boundary_tol=float(tol["boundary_tol"]))
    report = certify(S) if certify_set else None

    try:
        fld = AffineField.from_spec(_require(spec, "field"), n, m)
        pot = QuadraticPotential.from_spec(spec.get("potential"), n)
    except KeyError as exc:
        raise ScenarioError(f"missing field 'field.{exc.args[0]}'", f"field.{exc.args[0]}") from exc
    ctrl = _require(spec, "control")
    U = control_set_from_spec(_require(ctrl, "U", "control."), m)
    u = ControlPath.from_spec(ctrl.get("default", {"constant": [0.0] * m, "n_nodes": tol["grid"]}), m)
    if not u.admissible(U, 1e-12):
        raise ScenarioError("default control leaves U", "control.default")
    system = System(S, fld, pot, U, float(_require(spec, "Mbar")), name)
    check_mbar(system)
    x0 = _vec(_require(spec, "x0"), n)
    if S.psi(x0) > S.boundary_tol:
        raise ScenarioError("x0 lies outside C", "x0")
    gammas = spec.get("schedule", {}).get("gammas", list(DEFAULT_GAMMAS))
    try:
        schedule = PenaltySchedule(tuple(float(g) for g in gammas), system.Mbar, S.eta)
    except ValueError as exc:
        raise ScenarioError(str(exc), "schedule.gammas") from exc
    problem = None
    solve_gammas = None
    if spec.get("problem") is not None:
        try:
            problem = MayerProblem.from_spec(spec["problem"], system)
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"bad problem description: {exc}", "problem") from exc
        if "gammas" in spec["problem"]:
            solve_gammas = tuple(float(g) for g in spec["problem"]["gammas"])
            PenaltySchedule(solve_gammas, system.Mbar, S.eta)
    analytic = spec.get("analytic_reference")
    if analytic is not None:
        from .convergence import ANALYTIC

        if analytic not in ANALYTIC:
            raise ScenarioError(f"unknown analytic reference {analytic!r}", "analytic_reference")
    return Scenario(name, system, x0, u, schedule, tol, problem, analytic, str(spec.get("provenance", "")),
                    solve_gammas, report, raw)


def load_scenario(path, certify_set: bool = True) -> Scenario:
    """Parse and validate a scenario file; bare names resolve to the shipped corpus."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = Path(path + ".json")
    if not p.exists():
        shipped = resources.files("sweeper") / "scenarios" / p.name
        if not shipped.is_file():
            raise FileNotFoundError(path)
        text = shipped.read_text()
    else:
        text = p.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}", "") from exc
    try:
        return scenario_from_spec(spec, certify_set)
    except CertificationError:
        raise
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}", exc.field) from exc


def shipped_scenarios() -> list:
    """Names of the scenario files bundled with the package."""
    d = resources.files("sweeper") / "scenarios"
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".json"))
