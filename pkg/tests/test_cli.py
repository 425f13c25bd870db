"""
End-to-end tests of the command line: config loading, outputs and exit codes.
"""
import csv
import json

import pytest

from bifamp.cli import GENERAL_COLUMNS, main


def write_config(path, document):
    path.write_text(json.dumps(document))
    return str(path)


@pytest.fixture
def dictionary_config():
    return {"problem": {"application": "dictionary", "alpha": 0.5, "pi": 2.0, "rho": 0.2, "delta": 0.0}}


class TestStateEvolutionCommand:
    """bifamp se"""

    def test_informative_fixed_point(self, tmp_path, dictionary_config):
        """JSON carries the fixed point, the CSV the trajectory."""
        document = {**dictionary_config, "se": {"init": "informative", "check_quadrature": False}}
        config = write_config(tmp_path / "se.json", document)
        out = tmp_path / "results" / "se_out.json"
        assert main(["se", "--config", config, "--out", str(out)]) == 0

        payload = json.loads(out.read_text())
        assert payload["fixed_point"]["e_x"] < 1e-8
        with open(out.with_suffix(".csv"), newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == ["iteration", "m_x", "m_f0"]
        assert len(rows) == payload["fixed_point"]["iterations"] + 1

    @pytest.mark.parametrize("extra", [
        {"se": {"general": True, "check_quadrature": False}},
        {"truth": {"application": "dictionary", "alpha": 0.5, "pi": 3.0, "rho": 0.2, "delta": 0.05}},
    ])
    def test_general_recursion(self, tmp_path, extra):
        """se.general or a generating problem switches to the six-parameter recursion."""
        problem = {"application": "dictionary", "alpha": 0.5, "pi": 3.0, "rho": 0.2, "delta": 0.01}
        config = write_config(tmp_path / "general.json", {"problem": problem, **extra})
        out = tmp_path / "general_out.json"
        assert main(["se", "--config", config, "--out", str(out)]) == 0

        fixed_point = json.loads(out.read_text())["general_fixed_point"]
        assert fixed_point["converged"]
        assert 0.0 < fixed_point["e_x"] < 0.2
        with open(out.with_suffix(".csv"), newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == GENERAL_COLUMNS
        assert len(rows) == fixed_point["iterations"] + 1

    def test_unknown_key_is_config_error(self, tmp_path, dictionary_config):
        """Extra keys are rejected with exit code 2."""
        config = write_config(tmp_path / "bad.json", {**dictionary_config, "bogus": 1})
        assert main(["se", "--config", config, "--out", str(tmp_path / "se.json")]) == 2

    def test_missing_config(self, tmp_path):
        """An unreadable config file is a configuration error."""
        assert main(["se", "--config", str(tmp_path / "absent.json")]) == 2


class TestThresholdsCommand:
    """bifamp thresholds"""

    def test_completion_report(self, tmp_path):
        """Closed forms are written even when the bracket holds no transition."""
        document = {
            "problem": {"application": "completion", "alpha": 4.0, "pi": 4.0, "eps": 0.7},
            "phase": {"axis": "eps", "bracket": [0.6, 0.9]},
        }
        config = write_config(tmp_path / "thresholds.json", document)
        out = tmp_path / "thresholds_out.json"
        assert main(["thresholds", "--config", config, "--out", str(out), "--threads", "1"]) == 0

        report = json.loads(out.read_text())
        assert report["counting_bound"]["value"] == pytest.approx(0.5)
        assert report["uninformative_stability"]["value"] == pytest.approx(0.25)
        assert report["spinodal"]["value"] is None
        assert report["first_order"]["value"] is None

    def test_bracket_outside_valid_range(self, tmp_path):
        """A bracket that pushes eps above one exits with code 2."""
        document = {
            "problem": {"application": "completion", "alpha": 4.0, "pi": 4.0, "eps": 0.7},
            "phase": {"axis": "eps", "bracket": [0.6, 1.2]},
        }
        config = write_config(tmp_path / "thresholds.json", document)
        assert main(["thresholds", "--config", config, "--out", str(tmp_path / "out.json"), "--threads", "1"]) == 2


class TestAmpCommands:
    """bifamp gen followed by bifamp amp"""

    def test_planted_run_from_instance_file(self, tmp_path):
        """An instance written by gen is read back by amp."""
        problem = {"application": "dictionary", "alpha": 0.5, "pi": 2.0, "rho": 0.2, "delta": 1e-6}
        gen_config = write_config(tmp_path / "gen.json", {"problem": problem, "n": 30, "seed": 5})
        instance = tmp_path / "instance.bin"
        assert main(["gen", "--config", gen_config, "--out", str(instance)]) == 0
        assert instance.exists()

        amp_document = {
            "problem": problem,
            "n": 30,
            "instance": str(instance),
            "amp": {"init": "planted", "max_iterations": 20},
        }
        amp_config = write_config(tmp_path / "amp.json", amp_document)
        out = tmp_path / "amp_out.json"
        assert main(["amp", "--config", amp_config, "--out", str(out)]) == 0

        run = json.loads(out.read_text())["runs"][0]
        assert run["seed"] == 5
        assert run["mse"]["mse_z"] < 1e-4
        assert run["free_entropy"]["n"] == 30
        assert out.with_suffix(".csv").exists()

    def test_strict_unconverged_exit(self, tmp_path):
        """--strict turns an iteration cap into exit code 4, outputs are still written."""
        document = {
            "problem": {"application": "cs", "alpha": 0.6, "pi": 1.0, "rho": 0.2, "delta": 1e-4},
            "n": 20,
            "amp": {"init": "cs", "max_iterations": 1},
        }
        config = write_config(tmp_path / "amp.json", document)
        out = tmp_path / "amp_out.json"
        assert main(["amp", "--config", config, "--out", str(out), "--strict"]) == 4
        assert out.exists()


class TestPhaseCommand:
    """bifamp phase"""

    def test_grid_csv_and_plot(self, tmp_path, dictionary_config):
        """One CSV row per grid point plus a gnuplot script."""
        document = {
            "problem": {**dictionary_config["problem"], "delta": 1e-2},
            "se": {"check_quadrature": False},
            "phase": {"grid": {"pi": [3.0, 2.5]}},
        }
        config = write_config(tmp_path / "phase.json", document)
        out = tmp_path / "phase.csv"
        assert main(["phase", "--config", config, "--out", str(out), "--threads", "1", "--emit-plot"]) == 0

        with open(out, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [float(row["pi"]) for row in rows] == [2.5, 3.0]
        assert all(row["error"] == "" for row in rows)
        script = out.with_suffix(".gp").read_text()
        assert "plot 'phase.csv'" in script
