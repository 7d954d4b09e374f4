import json
import subprocess
import sys

import numpy as np
import pytest

from mmreg import LossSpec, combined_loss, tre, zero_field
from mmreg.cli import main, parse_metrics
from mmreg.errors import ValidationError
from mmreg.io import (read_field, read_landmarks, read_volume, write_field, write_landmarks,
                      write_volume)
from mmreg import DisplacementField, Landmark, LandmarkSet, Volume


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def case(tmp_path):
    out = tmp_path / "case"
    assert run("phantom", "--seed", 7, "--dims", 16, "--amplitude", 2, "--out-dir", out) == 0
    return out


def test_help_exits_zero():
    for sub in ([], ["phantom"], ["register"], ["warp"], ["evaluate"], ["compare"]):
        proc = subprocess.run([sys.executable, "-m", "mmreg.cli", *sub, "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "usage" in proc.stdout


def test_register_help_lists_defaults():
    proc = subprocess.run([sys.executable, "-m", "mmreg.cli", "register", "--help"],
                          capture_output=True, text=True)
    for flag in ("--metrics", "--lambda", "--iters", "--lr", "--levels", "--out-fwd", "--report"):
        assert flag in proc.stdout


def test_phantom_files_and_bad_amplitude(case, tmp_path, capsys):
    assert sorted(p.name for p in case.iterdir()) == ["fixed.nii", "gt_field.nii", "landmarks.csv",
                                                      "moving.nii"]
    assert run("phantom", "--amplitude", -1, "--out-dir", tmp_path / "x") == 1
    assert "max_amplitude" in capsys.readouterr().err
    assert run("phantom", "--dims", "abc", "--out-dir", tmp_path / "x") == 1


def test_phantom_deterministic(case, tmp_path):
    other = tmp_path / "again"
    run("phantom", "--seed", 7, "--dims", 16, "--amplitude", 2, "--out-dir", other)
    for name in ("fixed.nii", "moving.nii", "gt_field.nii", "landmarks.csv"):
        assert (case / name).read_bytes() == (other / name).read_bytes()


def test_register_self_identity(case, tmp_path):
    rep = tmp_path / "r.json"
    fwd = tmp_path / "fwd.nii"
    code = run("register", "--fixed", case / "fixed.nii", "--moving", case / "fixed.nii",
               "--levels", 2, "--out-fwd", fwd, "--report", rep)
    assert code == 0
    doc = json.loads(rep.read_text())
    assert doc["final"]["total"] <= doc["initial"]["total"]
    assert read_field(fwd).magnitude().mean() < 0.05
    assert doc["artifact"]["name"] == "mmreg" and doc["config"]["lambda"] == 1.0


def test_register_report_recomputes(case, tmp_path):
    rep, fwd, bwd = tmp_path / "r.json", tmp_path / "f.nii", tmp_path / "b.nii"
    code = run("register", "--fixed", case / "fixed.nii", "--moving", case / "moving.nii",
               "--metrics", "mse:0.5,ncc:0.5", "--lr", 0.1, "--iters", 5, "--levels", 2,
               "--landmarks", case / "landmarks.csv", "--out-fwd", fwd, "--out-bwd", bwd,
               "--report", rep)
    assert code == 0
    doc = json.loads(rep.read_text())
    X, Y = read_volume(case / "moving.nii"), read_volume(case / "fixed.nii")
    again = combined_loss(X, Y, read_field(fwd), read_field(bwd), LossSpec())
    assert abs(again.total - doc["final"]["total"]) <= 1e-9
    lm = read_landmarks(case / "landmarks.csv")
    assert doc["tre"]["mean"] == pytest.approx(tre(lm, read_field(fwd)).mean, abs=1e-12)
    assert doc["tre_identity"]["mean"] == tre(lm, zero_field(X.dims)).mean
    assert len(doc["loss_trace"]) == 2 and len(doc["loss_trace"][0]) == 6


def test_register_single_metric_reduction(case, tmp_path):
    rep = tmp_path / "r.json"
    run("register", "--fixed", case / "fixed.nii", "--moving", case / "moving.nii",
        "--metrics", "mse:1.0", "--lambda", 0, "--iters", 1, "--levels", 1, "--report", rep)
    doc = json.loads(rep.read_text())
    assert doc["final"]["total"] == doc["final"]["forward"]["mse"] + doc["final"]["backward"]["mse"]


def test_register_errors(case, tmp_path, capsys):
    common = ["register", "--fixed", case / "fixed.nii", "--moving", case / "moving.nii"]
    assert run(*common, "--metrics", "mse:-1") == 1
    assert run(*common, "--metrics", "foo:1") == 1
    assert run(*common, "--levels", 9) == 1
    assert run("register", "--fixed", tmp_path / "none.nii", "--moving", case / "moving.nii") == 1
    cfg = tmp_path / "c.json"
    cfg.write_text('{"lambda": 1, "oops": 2}')
    assert run(*common, "--config", cfg) == 1
    # a learning rate this large overflows the coordinates and the loss goes non-finite
    assert run(*common, "--lr", 1e308, "--iters", 3, "--levels", 1) == 2
    capsys.readouterr()


def test_config_file_and_flag_override(case, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"metrics": [{"name": "ncc"}], "lambda": 0.5, "iterations": 1,
                               "levels": 1}))
    rep = tmp_path / "r.json"
    assert run("register", "--fixed", case / "fixed.nii", "--moving", case / "moving.nii",
               "--config", cfg, "--lambda", 0.25, "--report", rep) == 0
    doc = json.loads(rep.read_text())["config"]
    assert doc["metrics"] == [{"name": "ncc", "weight": 1.0}] and doc["lambda"] == 0.25


def test_parse_metrics():
    assert parse_metrics("mse,ncc") == (("mse", 0.5), ("ncc", 0.5))
    assert parse_metrics("mse:0.3,ncc:0.9") == (("mse", 0.3), ("ncc", 0.9))
    with pytest.raises(ValidationError):
        parse_metrics("mse:0.3,ncc")


def test_warp_zero_field_and_gt(case, tmp_path):
    z = tmp_path / "z.nii"
    write_field(z, zero_field((16, 16, 16)))
    assert run("warp", "--volume", case / "moving.nii", "--field", z, "--out", tmp_path / "o.nii") == 0
    assert (tmp_path / "o.nii").read_bytes() == (case / "moving.nii").read_bytes()
    run("warp", "--volume", case / "moving.nii", "--field", case / "gt_field.nii",
        "--out", tmp_path / "g.nii")
    diff = np.abs(read_volume(tmp_path / "g.nii").data - read_volume(case / "fixed.nii").data).mean()
    assert diff <= 1e-2
    write_field(z, zero_field((8, 8, 8)))
    assert run("warp", "--volume", case / "moving.nii", "--field", z, "--out", tmp_path / "o.nii") == 1


def test_evaluate(tmp_path):
    lm = tmp_path / "l.csv"
    write_landmarks(lm, LandmarkSet((Landmark("a", (1, 1, 1), (4, 5, 1)),
                                     Landmark("b", (2, 2, 2), (2, 2, 2)))))
    f = tmp_path / "u.nii"
    write_field(f, zero_field((6, 6, 6)))
    rep = tmp_path / "e.json"
    assert run("evaluate", "--landmarks", lm, "--field", f, "--taus", "1,5", "--report", rep) == 0
    doc = json.loads(rep.read_text())
    assert doc["tre"]["distances_mm"] == {"a": 5.0, "b": 0.0}
    assert doc["hit_rate"] == {"tau_mm": [1.0, 5.0], "fraction": [0.5, 1.0]}
    assert doc["spacing"] == [1.0, 1.0, 1.0]


def _configs(tmp_path):
    out = []
    for name, metrics, lam in (("mse", [{"name": "mse"}], 0.02), ("ncc", [{"name": "ncc"}], 1.0),
                               ("both", [{"name": "mse"}, {"name": "ncc"}], 1.0)):
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps({"metrics": metrics, "lambda": lam, "learning_rate": 0.1,
                                 "iterations": 4, "levels": 2}))
        out.append(p)
    return out


def test_compare_rows_match_standalone(case, tmp_path, capsys):
    cfgs = _configs(tmp_path)
    rep = tmp_path / "cmp.json"
    assert run("compare", "--case-dir", case, "--configs", ",".join(map(str, cfgs)),
               "--report", rep, "--no-timing") == 0
    doc = json.loads(rep.read_text())
    rows = {r["name"]: r for r in doc["comparison"]["rows"]}
    assert list(rows) == ["mse", "ncc", "both"]
    assert [t["name"] for t in doc["comparison"]["t_tests"]] == ["ncc", "both"]
    for cfg in cfgs:
        single = tmp_path / f"{cfg.stem}_r.json"
        run("register", "--fixed", case / "fixed.nii", "--moving", case / "moving.nii",
            "--config", cfg, "--landmarks", case / "landmarks.csv", "--report", single)
        assert rows[cfg.stem]["mean"] == json.loads(single.read_text())["tre"]["mean"]
    assert "TRE mean" in capsys.readouterr().out


def test_compare_duplicate_and_pooled(case, tmp_path):
    cfg = _configs(tmp_path)[0]
    rep = tmp_path / "cmp.json"
    assert run("compare", "--case-dir", case, "--configs", f"{cfg},{cfg}", "--report", rep) == 0
    doc = json.loads(rep.read_text())
    assert [r["name"] for r in doc["comparison"]["rows"]] == ["mse", "mse#2"]
    assert doc["comparison"]["t_tests"][0]["p"] == 1.0
    other = tmp_path / "case2"
    run("phantom", "--seed", 8, "--dims", 16, "--amplitude", 2, "--out-dir", other)
    assert run("compare", "--case-dir", f"{case},{other}", "--configs", str(cfg),
               "--report", rep) == 0
    doc = json.loads(rep.read_text())
    assert doc["comparison"]["rows"][0]["n"] == 12


def test_compare_partial_failure(case, tmp_path):
    good = _configs(tmp_path)[0]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1e308, "iterations": 3, "levels": 1}))
    rep = tmp_path / "cmp.json"
    assert run("compare", "--case-dir", case, "--configs", f"{good},{bad}", "--report", rep) == 2
    doc = json.loads(rep.read_text())
    assert doc["partial"] is True
    assert [r["name"] for r in doc["comparison"]["rows"]] == ["mse"]
    assert doc["runs"]["bad"]["case"]["status"] == "failed"


def test_argparse_error_exit_code(capsys):
    assert main(["register"]) == 1
    assert main(["--version"]) == 0
    assert "mmreg 0.1.0" in capsys.readouterr().out
