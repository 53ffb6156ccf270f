import json
import subprocess
import sys

import pytest

from sweeper.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main, parse_tolerances, UsageError
from sweeper.scenario import load_scenario


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def bad_eta(tmp_path):
    spec = json.loads(load_scenario("slide1d").to_json())
    spec["name"] = "bad-eta"
    spec["set"]["eta"] = 2.5
    p = tmp_path / "bad-eta.json"
    p.write_text(json.dumps(spec))
    return p


class TestCommands:
    def test_sweep_slide(self, tmp_path):
        assert main(["sweep", "slide1d", "--out", str(tmp_path)]) == EXIT_OK
        out = tmp_path / "slide1d"
        assert {"sweep.csv", "sweep.json", "sweep.png"} <= set(files(out))
        assert json.loads((out / "sweep.json").read_text())["verdict"] == "PASS"

    def test_simulate(self, tmp_path):
        assert main(["simulate", "disk-slide", "--gamma", "1000", "--out", str(tmp_path)]) == EXIT_OK
        out = tmp_path / "disk-slide"
        assert (out / "trajectory_gamma1000.csv").read_text().startswith("t,x_1,x_2,")
        assert (out / "trajectory_gamma1000.png").read_bytes()[:4] == b"\x89PNG"

    def test_oracle(self, tmp_path):
        assert main(["oracle", "disk-slide", "--h", "1e-3", "--out", str(tmp_path)]) == EXIT_OK
        d = json.loads((tmp_path / "disk-slide" / "oracle.json").read_text())
        assert d["bound"] == "PASS"

    def test_certify(self, tmp_path):
        assert main(["certify", "ellipse-graze", "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "ellipse-graze" / "certify.json").read_text())["passed"]

    def test_solve_and_check(self, tmp_path):
        assert main(["solve", "reach1d", "--gamma", "10000", "--no-plots", "--out", str(tmp_path)]) == EXIT_OK
        out = tmp_path / "reach1d"
        sol = json.loads((out / "sol.json").read_text())
        assert sol["J"] <= -0.99
        assert main(["check-nc", "reach1d", "--solution", str(out / "sol.json"), "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((out / "nc_report.json").read_text())["verdict"] == "PASS"
        assert (out / "adjoint.csv").read_text().startswith("t,p_1,q_1")
        assert (out / "adjoint.png").exists()


class TestExitCodes:
    def test_certification_failure(self, tmp_path, bad_eta):
        assert main(["certify", str(bad_eta), "--out", str(tmp_path)]) == EXIT_FAIL
        assert main(["sweep", str(bad_eta), "--out", str(tmp_path)]) == EXIT_ERROR

    def test_sweep_fail_verdict(self, tmp_path):
        code = main(["sweep", "slide1d", "--gammas", "10,100", "--no-plots", "--out", str(tmp_path)])
        assert code == EXIT_FAIL

    def test_gamma_conflict(self, tmp_path):
        assert main(["simulate", "slide1d", "--gamma", "10", "--gammas", "10,100", "--out", str(tmp_path)]) == 2

    def test_unknown_command(self, tmp_path):
        assert main(["fly", "slide1d"]) == EXIT_ERROR

    def test_missing_scenario(self, tmp_path):
        assert main(["simulate", "nowhere", "--out", str(tmp_path)]) == EXIT_ERROR

    def test_check_nc_needs_solution(self, tmp_path):
        assert main(["check-nc", "reach1d", "--out", str(tmp_path)]) == EXIT_ERROR

    def test_no_problem(self, tmp_path):
        assert main(["solve", "slide1d", "--out", str(tmp_path)]) == EXIT_ERROR


class TestTolerances:
    def test_parse(self):
        assert parse_tolerances(["--tol.sweep_tol", "0.1", "--tol.grid=51"]) == {"sweep_tol": 0.1, "grid": 51}

    def test_unknown(self):
        with pytest.raises(UsageError):
            parse_tolerances(["--tol.bogus", "1"])

    def test_override_changes_verdict(self, tmp_path):
        args = ["sweep", "slide1d", "--gammas", "10,100", "--no-plots", "--out", str(tmp_path)]
        assert main(args + ["--tol.sweep_tol", "10"]) == EXIT_OK

    def test_unknown_flag(self, tmp_path):
        assert main(["simulate", "slide1d", "--tol.bogus=1", "--out", str(tmp_path)]) == EXIT_ERROR


class TestOutput:
    def test_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SWEEPER_OUT", str(tmp_path / "env"))
        assert main(["certify", "slide1d"]) == EXIT_OK
        assert (tmp_path / "env" / "slide1d" / "certify.json").exists()

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SWEEPER_OUT", str(tmp_path / "env"))
        assert main(["certify", "slide1d", "--out", str(tmp_path / "flag")]) == EXIT_OK
        assert (tmp_path / "flag" / "slide1d" / "certify.json").exists()
        assert not (tmp_path / "env").exists()

    def test_byte_identical(self, tmp_path):
        for run in ("a", "b"):
            root = str(tmp_path / run)
            assert main(["sweep", "slide1d", "--out", root]) == EXIT_OK
            assert main(["oracle", "disk-slide", "--out", root]) == EXIT_OK
            assert main(["simulate", "ellipse-graze", "--gamma", "1000", "--out", root]) == EXIT_OK
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        assert a.keys() == b.keys() and len(a) >= 9
        assert all(a[k] == b[k] for k in a)

    def test_console_script(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "sweeper.cli", "certify", "slide1d", "--out", str(tmp_path)],
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        assert "certification PASS" in r.stderr
