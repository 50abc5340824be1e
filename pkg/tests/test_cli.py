import csv
import subprocess
import sys

import numpy as np
import pytest

from weakiv.cli import main

from .test_harness import write_dataset


def run_cli(*args):
    return main(list(args))


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert run_cli("--command", "power") == 1  # no design
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert run_cli("--frobnicate") == 1

    def test_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("y1,y2,z1\n1,2,x\n")
        code = run_cli("--command", "test", "--in", str(bad), "--tests", "ar")
        assert code == 2
        assert "data error" in capsys.readouterr().err

    def test_ok(self, tmp_path):
        data = write_dataset(str(tmp_path / "d.csv"))
        out = tmp_path / "r.csv"
        code = run_cli(
            "--command", "test", "--in", data, "--tests", "ar,lm,wald",
            "--beta0", "1.0", "--out", str(out),
        )
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["test"] for r in rows] == ["ar", "lm", "wald"]


class TestPowerCommand:
    def test_negative_grid_values_parse(self, tmp_path):
        out = tmp_path / "p.csv"
        code = run_cli(
            "--command", "power", "--design", "ns", "--k", "3",
            "--tests", "ar", "--reps", "20", "--seed", "1",
            "--beta-grid", "-2:2:2", "--out", str(out),
        )
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert [float(r["beta_rescaled"]) for r in rows] == [-2.0, 0.0, 2.0]

    def test_deterministic_output_bytes(self, tmp_path):
        args = [
            "--command", "power", "--design", "homoskedastic", "--k", "3",
            "--rho", "0.5", "--tests", "ar,cil", "--reps", "25",
            "--quantile-sims", "100", "--seed", "9", "--beta-grid", "0:2:2",
        ]
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        assert run_cli(*args, "--out", str(a), "--threads", "1") == 0
        assert run_cli(*args, "--out", str(b), "--threads", "2") == 0
        assert a.read_bytes() == b.read_bytes()


class TestConfigFile:
    def test_config_supplies_and_flags_win(self, tmp_path):
        data = write_dataset(str(tmp_path / "d.csv"))
        conf = tmp_path / "run.conf"
        conf.write_text(
            "command = test\n"
            f"in = {data}\n"
            "tests = ar\n"
            "beta0 = 1.0\n"
            "seed = 3\n"
            "# comment line\n"
        )
        out1 = tmp_path / "o1.csv"
        assert run_cli("--config", str(conf), "--out", str(out1)) == 0
        rows = list(csv.DictReader(out1.open()))
        assert rows[0]["test"] == "ar"
        out2 = tmp_path / "o2.csv"
        assert run_cli("--config", str(conf), "--tests", "lm",
                       "--out", str(out2)) == 0
        rows2 = list(csv.DictReader(out2.open()))
        assert rows2[0]["test"] == "lm"

    def test_unknown_key_rejected(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("nonsense = 5\n")
        assert run_cli("--config", str(conf)) == 1


class TestConfsetCommand:
    def test_interval_and_notes(self, tmp_path):
        data = write_dataset(str(tmp_path / "d.csv"), beta=1.0, seed=7)
        out = tmp_path / "cs.csv"
        code = run_cli(
            "--command", "confset", "--in", data, "--tests", "ar",
            "--beta-grid", "0:2:0.1", "--seed", "2", "--out", str(out),
        )
        assert code == 0
        rows = list(csv.reader(out.open()))
        header = rows[0]
        sections = {r[0] for r in rows[1:]}
        assert "point" in sections
        assert "interval" in sections
        point_rows = [r for r in rows[1:] if r[0] == "point"]
        assert len(point_rows) == 21

    def test_sigma_file_roundtrip(self, tmp_path):
        data = write_dataset(str(tmp_path / "d.csv"), k=2)
        sig = np.eye(4) * 2.0
        sig_path = tmp_path / "sigma.csv"
        np.savetxt(sig_path, sig, delimiter=",")
        out = tmp_path / "r.csv"
        code = run_cli(
            "--command", "test", "--in", data, "--sigma-file", str(sig_path),
            "--tests", "ar", "--beta0", "1.0", "--out", str(out),
        )
        assert code == 0


class TestQuantileCommand:
    def test_forces_simulation(self, tmp_path):
        data = write_dataset(str(tmp_path / "d.csv"), seed=11)
        out = tmp_path / "q.csv"
        code = run_cli(
            "--command", "quantile", "--in", data, "--tests", "ar",
            "--beta0", "1.0", "--quantile-sims", "500", "--seed", "4",
            "--out", str(out),
        )
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        from scipy.stats import chi2

        crit = float(rows[0]["critical_value"])
        assert crit != pytest.approx(chi2.ppf(0.95, 3), abs=1e-9)
        assert crit == pytest.approx(chi2.ppf(0.95, 3), rel=0.15)


class TestDiagOptCommand:
    def test_writes_two_tables(self, tmp_path):
        out = tmp_path / "diag.csv"
        code = run_cli(
            "--command", "diag-opt", "--design", "ns", "--k", "3",
            "--reps", "30", "--seed", "1", "--out", str(out),
        )
        assert code == 0
        pct = tmp_path / "diag_percentage.csv"
        factor = tmp_path / "diag_factor.csv"
        assert pct.exists() and factor.exists()
        rows = list(csv.reader(pct.open()))
        assert rows[0] == ["scheme", "1,No", "0,Yes", "51,No", "50,Yes"]
        assert rows[1][1] == ""  # self-pair dashed


def test_console_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "weakiv.cli", "--command", "bogus"],
        capture_output=True, text=True,
    )
    assert out.returncode == 1
