import csv
import json
import subprocess
import sys

import pytest

from remaging.analysis import CSV_COLUMNS
from remaging.cli import load_config, main


def run(tmp_path, *args, sub="out"):
    out = tmp_path / sub
    code = main([*args, "--out", str(out)])
    manifest = json.loads((out / "manifest.json").read_text()) if (out / "manifest.json").exists() else None
    return code, out, manifest


def test_k_constant(tmp_path, capsys):
    code, out, m = run(tmp_path, "k-constant")
    assert code == 0 and m["status"] == "ok"
    rows = list(csv.DictReader(open(out / "k_constant.csv")))
    assert len(rows) == 8 and all(float(r["abs_error"]) < 1e-8 for r in rows)
    assert "k_constant.csv" in m["outputs"]


def test_env_deterministic(tmp_path):
    c1, o1, m1 = run(tmp_path, "env", "--n", "8", "--seed", "4", sub="a")
    c2, o2, m2 = run(tmp_path, "env", "--n", "8", "--seed", "4", sub="b")
    assert c1 == c2 == 0
    assert m1["outputs"] == m2["outputs"]
    s = json.loads((o1 / "env_summary.json").read_text())[0]
    assert {"deep_size_ratio", "min_deep_distance", "n_deep"} <= set(s)


def test_invalid_params_exit_2(tmp_path, capsys):
    code, _, m = run(tmp_path, "env", "--n", "0")
    assert code == 2 and m["status"] == "invalid-config"
    assert "N_positive" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[common]\nbeta = abc\n")
    assert main(["env", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["env", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 2
    assert main(["env", "--threads", "0", "--out", str(tmp_path / "o")]) == 2


def test_config_layering(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[common]\nn = 9\nbeta = 1.2\n[aging]\nn_traj = 7\n")
    c = load_config("aging", str(cfg), {"beta": 1.3, "alpha": None})
    assert c["n"] == "9" and c["beta"] == "1.3" and c["n_traj"] == "7" and c["alpha"] == "0.7"


def test_spectral(tmp_path):
    code, out, m = run(tmp_path, "spectral", "--n", "8")
    rep = json.loads((out / "spectral.json").read_text())
    assert code == 0 and rep["bound_le_gap"] is True


def test_spectral_budget(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[spectral]\npair_budget = 1000\n")
    code, out, m = run(tmp_path, "spectral", "--n", "8", "--config", str(cfg))
    rep = json.loads((out / "spectral.json").read_text())
    assert code == 0 and rep["poincare_lower"] is None and rep["lambda_exact"] is not None


def test_potential(tmp_path):
    code, out, m = run(tmp_path, "potential", "--n", "6")
    reps = json.loads((out / "potential.json").read_text())
    assert code == 0 and reps
    assert all(r["extremal_residual"] < 1e-8 and r["prop_a1_slack"] >= 0 for r in reps)


def test_potential_budget(tmp_path):
    code, _, m = run(tmp_path, "potential", "--n", "21")
    assert code == 3 and m["status"] == "budget-exceeded"


def test_potential_violation_exit_4(tmp_path, monkeypatch):
    import remaging.potential as pot

    real = pot.bound_check_appendix

    def broken(*a, **kw):
        r = real(*a, **kw)
        r.slack = -1.0
        return r

    monkeypatch.setattr(pot, "bound_check_appendix", broken)
    code, _, m = run(tmp_path, "potential", "--n", "6")
    assert code == 4 and m["status"] == "violation"


def test_mixing(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[mixing]\nn_samples = 2000\n")
    code, out, _ = run(tmp_path, "mixing", "--n", "6", "--config", str(cfg))
    rep = json.loads((out / "mixing.json").read_text())
    assert code == 0 and rep["tv"] < 0.1 and rep["survival"][0]["empirical"] == 1.0


def test_aging_and_manifest_replay(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[aging]\nn_traj = 40\nrn_samples = 20\nt_grid = 0.5,1\n")
    code, out, m = run(tmp_path, "aging", "--n", "8", "--seed", "3", "--config", str(cfg), sub="a")
    assert code == 0
    with open(out / "aging.csv") as fh:
        r = csv.reader(fh)
        assert tuple(next(r)) == CSV_COLUMNS
    rows = list(csv.DictReader(open(out / "aging.csv")))
    assert len(rows) == 8
    assert all(float(x["empirical"]) == 1.0 for x in rows if float(x["lambda"]) == 0)
    code2, _, m2 = run(tmp_path, "aging", "--config", str(out / "manifest.json"), sub="b")
    assert code2 == 0 and m2["outputs"] == m["outputs"] and m2["config"] == m["config"]


def test_manifest_wrong_command(tmp_path):
    code, out, _ = run(tmp_path, "k-constant", sub="a")
    assert main(["env", "--config", str(out / "manifest.json"), "--out", str(tmp_path / "b")]) == 2


def test_module_entry_point(tmp_path):
    p = subprocess.run([sys.executable, "-m", "remaging", "k-constant", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert p.returncode == 0 and "K=" in p.stdout


def test_unknown_command():
    with pytest.raises(SystemExit):
        main(["nope"])
