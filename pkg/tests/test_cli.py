import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from analysis import scalar_eigenvalues
from main import RunConfig, build_parser, main
from reports import ReportWriter, RunSummary, read_trajectory_csv, to_plain


def _json_output(capsys):
    out = capsys.readouterr().out
    return json.loads(out[: out.rindex("}") + 1])


class TestParser:
    def test_usage_errors(self):
        assert main([]) == 2
        assert main(["run", "rosenbrock"]) == 2
        assert main(["solve", "--controller", "newton"]) == 2

    def test_sweep_rejects_step_overrides(self, capsys):
        assert main(["run", "quadratic-sweep", "--dt", "1e-3"]) == 2
        assert main(["run", "quadratic-sweep", "--tmax", "5"]) == 2
        assert "do not apply to quadratic-sweep" in capsys.readouterr().err

    def test_help(self):
        assert main(["--help"]) == 0

    def test_defaults(self):
        args = build_parser().parse_args(["solve"])
        assert args.preset == "random"
        assert args.controller == "pi"
        assert args.tmax == 100.0


class TestRunConfig:
    def test_solve_needs_dimensions(self):
        with pytest.raises(ValueError):
            RunConfig(n=3)

    def test_fl_needs_m_at_most_n(self):
        with pytest.raises(ValueError):
            RunConfig(n=2, m=3, controller="fl")
        assert RunConfig(n=3, m=2, controller="fl").controller.value == "fl"


class TestAnalyze:
    def test_scalar(self, capsys):
        assert main(["analyze", "--preset", "scalar", "--w", "1", "--kp", "2", "--ki", "1"]) == 0
        data = json.loads(capsys.readouterr().out)
        order = lambda z: (z.real, z.imag)
        eigenvalues = sorted((complex(re, im) for re, im in data["lti"]["eigenvalues"]), key=order)
        expected = sorted(scalar_eigenvalues(1.0, 2.0, 1.0), key=order)
        assert_allclose(eigenvalues, expected, atol=1e-10)
        assert data["lti"]["hurwitz"] is True

    def test_indefinite_without_proportional_gain(self, capsys):
        assert main(["analyze", "--preset", "indefinite", "--kp", "0", "--ki", "1"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["lti"]["hurwitz"] is False
        assert data["lti"]["spectral_abscissa"] == pytest.approx(0.5)

    def test_zero_dynamics(self, capsys):
        assert main(["analyze", "--preset", "negative-curvature", "--zero-dynamics"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["zero_dynamics"]["second_order_sufficient"] is False

    def test_quadratic_tuning(self, capsys, tmp_path):
        assert main(["analyze", "--preset", "quadratic", "--kp", "1", "--ki", "20", "--out", str(tmp_path)]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["tuning"]["mu"] > 0
        assert data["pdgd_rate"] > 0
        assert (tmp_path / "analyze-quadratic.json").exists()


class TestSolve:
    def test_pdgd_diverges_on_indefinite(self, tmp_path):
        assert main(["solve", "--preset", "indefinite", "--controller", "pdgd", "--seed", "1",
                     "--dt", "1e-2", "--out", str(tmp_path)]) == 0
        summary = ReportWriter(tmp_path).load_summary()
        assert summary.runs[0]["status"] == "diverged"
        assert summary.runs[0]["hinf"] is None

    def test_pi_converges_with_trajectory(self, tmp_path, capsys):
        code = main(["solve", "--preset", "fl-demo", "--kp", "1", "--dt", "1e-2", "--tmax", "50",
                     "--csv", "--json", "--out", str(tmp_path)])
        assert code == 0
        printed = _json_output(capsys)
        assert printed["status"] == "converged"
        assert printed["kkt_distance"] <= 1e-5

        rows = read_trajectory_csv(tmp_path / "trajectory.csv")
        assert list(rows[0]) == ["t", "f", "hinf", "xdotinf", "x0", "x1", "l0"]
        times = [row["t"] for row in rows]
        assert times[0] == 0.0
        assert all(b > a for a, b in zip(times, times[1:]))

        summary = ReportWriter(tmp_path).load_summary()
        assert summary.experiment == "solve-fl-demo"
        assert summary.config["controller"] == "pi"

    def test_fl_rejects_wide_problem(self, capsys):
        assert main(["solve", "--n", "2", "--m", "3", "--controller", "fl"]) == 2
        assert "error" in capsys.readouterr().err


class TestValidate:
    def test_shidoku(self, tmp_path, capsys):
        assert main(["validate", "shidoku", "--samples", "3", "--out", str(tmp_path)]) == 0
        data = json.loads((tmp_path / "validate-shidoku.json").read_text())
        assert data["reports"][0]["passed"] is True
        assert "ok" in capsys.readouterr().out


class TestRun:
    def test_sysid_writes_summary(self, tmp_path):
        code = main(["run", "sysid", "--tmax", "0.5", "--out", str(tmp_path), "--csv"])
        assert code in (0, 1)
        summary = ReportWriter(tmp_path).load_summary()
        assert summary.experiment == "sysid"
        assert summary.config["t_max"] == 0.5
        assert (tmp_path / "runs.csv").exists()
        assert (tmp_path / "run-0.csv").exists()


class TestReports:
    def test_summary_round_trip(self, tmp_path):
        writer = ReportWriter(tmp_path / "nested")
        summary = RunSummary(
            experiment="chemical",
            seed=3,
            config={"dt": np.float64(5e-5)},
            runs=[{"run": 0, "objective": float("nan"), "x": np.arange(3.0)}],
            aggregate={"best": np.float64(2.1)},
        )
        writer.write_summary(summary)
        loaded = writer.load_summary()
        assert loaded.seed == 3
        assert loaded.runs[0]["objective"] is None
        assert loaded.runs[0]["x"] == [0.0, 1.0, 2.0]
        assert loaded.aggregate["best"] == 2.1

    def test_to_plain(self):
        assert to_plain({"a": np.int64(2), "b": (np.inf, 1j)}) == {"a": 2, "b": [None, [0.0, 1.0]]}

    def test_table_csv_skips_nested_values(self, tmp_path):
        path = ReportWriter(tmp_path).write_table_csv("runs.csv", [{"run": 0, "grid": [[1]]}, {"run": 1, "t": 2.0}])
        header = path.read_text().splitlines()[0]
        assert header == "run,t"
