import json

import numpy as np
import pytest

from pgnn_pf.cli import main
from pgnn_pf.data import read_dataset

from conftest import TWO_BUS

TINY_CONFIG = """\
[experiment]
n_steps = 300
seeds = 0
aux_seeds = 0
hidden = 8, 8
decoder_hidden = 4
max_epochs = 2
decoder_epochs = 2
outlier_levels = 0, 0.1

[report]
experiments = solver, modeling, recovery, interp_extrap, outliers

[train]
max_epochs = 2
hidden = 8, 8
decoder_hidden = 4
"""

# line too weak to carry the scheduled demand
WEAK = """\
BUS
1 3 0 0 0 0 1.0 0
2 1 50 10 0 0 1.0 0
BRANCH
1 2 0 2.0 0 0 0
GEN
1 100
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return str(path)


def run_dir(out):
    (d,) = [p for p in out.iterdir() if p.is_dir()]
    return d


class TestGen:
    def test_writes_dataset(self, tmp_path, capsys):
        assert main(["gen", "--steps", "40", "--seed", "7", "--out", str(tmp_path)]) == 0
        assert "converged 40/40" in capsys.readouterr().out
        d = run_dir(tmp_path)
        ds = read_dataset(d / "dataset.csv")
        assert len(ds) == 40 and ds.meta["case"] == "ieee57"
        manifest = json.loads((d / "manifest.json").read_text())
        assert {"config_hash", "seeds", "versions", "config"} <= set(manifest)
        assert manifest["seeds"] == [7]

    def test_zero_steps(self, tmp_path):
        assert main(["gen", "--steps", "0", "--out", str(tmp_path)]) == 0
        lines = (run_dir(tmp_path) / "dataset.csv").read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("step,")

    def test_missing_case(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.case")
        assert main(["gen", "--case", missing, "--out", str(tmp_path)]) == 2
        assert missing in capsys.readouterr().err

    def test_bad_case(self, tmp_path):
        bad = tmp_path / "bad.case"
        bad.write_text(TWO_BUS.replace("0 0.1", "zero 0.1"))
        assert main(["gen", "--case", str(bad), "--out", str(tmp_path)]) == 2

    def test_too_many_failures(self, tmp_path):
        weak = tmp_path / "weak.case"
        weak.write_text(WEAK)
        assert main(["gen", "--case", str(weak), "--steps", "20", "--out", str(tmp_path)]) == 3


class TestSolve:
    def test_base_case(self, tmp_path, capsys):
        assert main(["solve", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        norm = float(out.split("inf-norm ")[1].split()[0])
        assert norm <= 1e-8
        rows = (run_dir(tmp_path) / "solution.csv").read_text().splitlines()
        assert len(rows) == 58

    def test_two_bus(self, tmp_path):
        case = tmp_path / "two.case"
        case.write_text(TWO_BUS.replace("2 1 0 0 0 0 1.0 0", "2 1 50 20 0 0 1.0 0")
                        .replace("1 100", "1 100 50"))
        assert main(["solve", "--case", str(case), "--out", str(tmp_path)]) == 0
        row = (run_dir(tmp_path) / "solution.csv").read_text().splitlines()[2].split(",")
        v2, t2 = float(row[1]), float(row[2])
        # lossless x = 0.1 line: p2 = 10 v2 sin(t2), q2 = 10 v2^2 - 10 v2 cos(t2)
        assert 10 * v2 * np.sin(t2) == pytest.approx(-0.5, abs=1e-8)
        assert 10 * v2 ** 2 - 10 * v2 * np.cos(t2) == pytest.approx(-0.2, abs=1e-8)

    def test_infeasible(self, tmp_path):
        assert main(["solve", "--load-scale", "10", "--out", str(tmp_path)]) == 4


class TestTrain:
    def test_checkpoint_and_history(self, tmp_path, config):
        assert main(["gen", "--steps", "80", "--out", str(tmp_path / "g")]) == 0
        data = run_dir(tmp_path / "g") / "dataset.csv"
        assert main(["train", "--config", config, "--data", str(data), "--method", "mlp+bnn",
                     "--seed", "0", "1", "--out", str(tmp_path / "t")]) == 0
        d = run_dir(tmp_path / "t")
        for seed in (0, 1):
            assert (d / f"model-seed{seed}.npz").is_file()
            hist = (d / f"history-seed{seed}.csv").read_text().splitlines()
            assert hist[0] == "epoch,train_sup,train_unsup,val_sup,val_unsup" and len(hist) == 3

    def test_unknown_method(self, tmp_path, capsys):
        assert main(["train", "--method", "svr", "--out", str(tmp_path)]) == 2
        assert "mlp+tpbnn" in capsys.readouterr().err

    def test_diverged(self, tmp_path, config):
        assert main(["gen", "--steps", "60", "--out", str(tmp_path / "g")]) == 0
        data = run_dir(tmp_path / "g") / "dataset.csv"
        lines = data.read_text().splitlines()
        cells = lines[3].split(",")
        cells[5] = "nan"
        lines[3] = ",".join(cells)
        data.write_text("\n".join(lines) + "\n")
        assert main(["train", "--config", config, "--data", str(data), "--method", "mlp",
                     "--out", str(tmp_path / "t")]) == 5


class TestReport:
    def test_byte_identical_rerun(self, tmp_path, config):
        for name in ("a", "b"):
            assert main(["report", "--config", config, "--out", str(tmp_path / name)]) == 0
        da, db = run_dir(tmp_path / "a"), run_dir(tmp_path / "b")
        assert da.name == db.name
        csvs = sorted(p.name for p in da.glob("*.csv"))
        assert "ieee57_solver_comparison.csv" in csvs and "ieee57_recovery.csv" in csvs
        assert "ieee57_interpolation_gaps.csv" in csvs and "ieee57_outliers.csv" in csvs
        for name in csvs + ["manifest.json"]:
            assert (da / name).read_bytes() == (db / name).read_bytes(), name
        assert not list(da.glob("*.tmp"))

    def test_unknown_method(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[experiment]\nmethods = lr, svr\n")
        assert main(["report", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "valid solver methods" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[experiment]\nwidth = 3\n")
        assert main(["report", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_bad_subcommand():
    assert main(["fly"]) == 2
