import csv
import json

import numpy as np
import pytest

from a2cr import cli
from a2cr.env import read_pgm


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    code = cli.main(["train", "--out", str(out), "--total-frames", "200", "--reasoner-frames", "64",
                     "--set", "reasoner_start_fraction=0.5", "--set", "pool_capacity=32",
                     "--set", "world_length=24", "--set", "time_limit=60", "--set", "report_interval=100"])
    assert code == 0
    return out


def test_train_outputs(tiny_run, capsys):
    names = {p.name for p in tiny_run.iterdir()}
    assert {"train_report.csv", "episodes.csv", "label_history.csv", "pool.csv", "config.txt",
            "invocation.json", "checkpoints"} <= names
    inv = json.loads((tiny_run / "invocation.json").read_text())
    assert inv["command"] == "train" and inv["total_frames"] == 200
    manifest = json.loads((tiny_run / "checkpoints" / "final" / "manifest.json").read_text())
    assert manifest["a2c_frames"] == 200 and manifest["reasoner_frames"] == 64


def test_existing_directory_needs_force(tiny_run, tmp_path):
    out = tmp_path / "again"
    out.mkdir()
    assert cli.main(["sim-theorem", "--out", str(out), "--n", "100", "--capacity", "10",
                     "--tolerance", "1"]) == 1
    assert cli.main(["sim-theorem", "--out", str(out), "--n", "100", "--capacity", "10",
                     "--tolerance", "1", "--force"]) == 0


def test_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "a")]) == 1
    assert "config file not found" in capsys.readouterr().err
    assert cli.main(["train", "--set", "not_a_key=1", "--out", str(tmp_path / "b")]) == 1
    assert cli.main(["train", "--set", "gamma=2", "--out", str(tmp_path / "c")]) == 1
    assert cli.main(["explain", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "d")]) == 1
    assert cli.main(["sim-theorem", "--dist", "cauchy:0,1", "--out", str(tmp_path / "e")]) == 1
    assert cli.main(["--help"]) == 0


def test_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# tiny\ntotal_a2c_frames = 40\ntotal_reasoner_frames = 0\nworld_length = 20\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert "total_a2c_frames = 40" in (tmp_path / "run" / "config.txt").read_text()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["sim-theorem", "--n", "200", "--capacity", "20", "--tolerance", "1"]) == 0
    assert (tmp_path / "root" / "sim-theorem-seed0" / "theorem.csv").is_file()


def test_explain(tiny_run, tmp_path):
    out = tmp_path / "explain"
    assert cli.main(["explain", "--checkpoint", str(tiny_run / "checkpoints" / "final"), "--episodes", "2",
                     "--out", str(out)]) == 0
    eps = _rows(out / "episodes.csv")
    steps = _rows(out / "steps.csv")
    assert len(eps) == 2
    assert sum(int(e["length"]) for e in eps) == len(steps)
    assert {s["category"] for s in steps} <= {"Breakout", "Self-improvement", "Hovering", "Prospect"}


def test_saliency(tiny_run, tmp_path):
    out = tmp_path / "sal"
    assert cli.main(["saliency", "--checkpoint", str(tiny_run / "checkpoints" / "final"), "--steps", "0,2",
                     "--out", str(out)]) == 0
    index = _rows(out / "index.csv")
    assert len(index) == 2 * 5
    assert sum(int(r["predicted"]) for r in index if r["method"] == "gradcam") == 2
    img = read_pgm(out / index[0]["file"])
    assert img.shape == (64, 64) and 0 <= img.min() and img.max() <= 1
    assert cli.main(["saliency", "--checkpoint", str(tiny_run / "checkpoints" / "final"), "--methods", "lime",
                     "--out", str(tmp_path / "bad")]) == 1


def test_sweep(tiny_run, tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--checkpoint", str(tiny_run / "checkpoints" / "final"), "--k-max", "2",
                     "--episodes-per-k", "1", "--out", str(out)]) == 0
    rows = _rows(out / "sweep.csv")
    assert len(rows) == 3 * 4
    assert list(rows[0]) == ["k", "category", "mean", "std"]


def test_convergence_on_constant_history(tmp_path, capsys):
    hist = tmp_path / "h.csv"
    with open(hist, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["reasoner_frames", "a2c_frames", "p_breakout", "p_self_improvement", "p_hovering",
                     "p_prospect"])
        for i in range(50):
            wr.writerow([i, i, 0.4, 0.1, 0.3, 0.2])
    assert cli.main(["convergence", "--history", str(hist), "--out", str(tmp_path / "conv")]) == 0
    assert "training complete" in capsys.readouterr().out
    rows = _rows(tmp_path / "conv" / "convergence.csv")
    assert [r["converged"] for r in rows] == ["1"] * 4
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert cli.main(["convergence", "--history", str(bad), "--out", str(tmp_path / "c2")]) == 1


def test_sim_theorem_exit_codes(tmp_path):
    assert cli.main(["sim-theorem", "--dist", "normal:5,2", "--n", "50000", "--out", str(tmp_path / "ok")]) == 0
    rows = _rows(tmp_path / "ok" / "theorem.csv")
    assert [r["label"] for r in rows] == ["label_0", "label_1"]
    assert all(float(r["abs_error"]) < 0.02 for r in rows)
    assert cli.main(["sim-theorem", "--n", "300", "--capacity", "10", "--tolerance", "0",
                     "--out", str(tmp_path / "strict")]) == 2


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "a2cr", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "sim-theorem" in res.stdout and "train_report.csv" in res.stdout
