import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from wignerqdt.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SCHEMA, EXIT_UNUSABLE, main
from wignerqdt.tables import read_table

SMALL = """
detectors:
  - {kind: IdealPNR, label: ideal}
  - {kind: LossyPNR, eta: 0.9, label: lossy}
grid: {count: 11}
"""
NOISY = SMALL + "noise: {sigma_fraction: 0.01, iterations: 3, seed: 7}\n"


def _cfg(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_simulate_default_entry_count(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "r"), "--quiet"]) == EXIT_OK
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    sim = man["stages"]["simulate"]
    assert sim["entries"] == {"ideal": 51 * 50 * 3, "lossy": 51 * 50 * 3}
    diag = sim["diagnostics"]
    assert diag["thermal_tail_at_pmf_cutoff"] <= 1e-9 and diag["condition_estimate"] > 1e20
    assert man["config"]["noise"]["seed"] == 0
    t = read_table(tmp_path / "r" / "clicks" / "ideal_k0.tsv", "clicks")
    assert len(t) == 51 * 50


@pytest.mark.parametrize("extra", ["", "noise: {shots: 10000, seed: 3}\n", NOISY[len(SMALL):]])
def test_simulate_is_deterministic(tmp_path, extra):
    cfg = _cfg(tmp_path, SMALL + extra)
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name),
                     "--quiet"]) == EXIT_OK
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_seed_flag_changes_noise(tmp_path):
    cfg = _cfg(tmp_path, NOISY)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet", "--seed", "8"])
    qa = read_table(tmp_path / "a" / "clicks" / "lossy_k1.tsv", "clicks")["alpha_actual"]
    qb = read_table(tmp_path / "b" / "clicks" / "lossy_k1.tsv", "clicks")["alpha_actual"]
    assert not np.array_equal(qa, qb)
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["config"]["noise"]["seed"] == 8


def test_full_run_deterministic_and_worker_independent(tmp_path):
    cfg = _cfg(tmp_path, NOISY)
    assert main(["reconstruct", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert main(["reconstruct", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet",
                 "--workers", "2"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_rerun_from_manifest_reproduces(tmp_path):
    cfg = _cfg(tmp_path, NOISY)
    main(["reconstruct", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet", "--seed", "5"])
    man = str(tmp_path / "a" / "manifest.json")
    main(["reconstruct", "--config", man, "--out", str(tmp_path / "b"), "--quiet"])
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_reconstruct_from_stats_and_summary(tmp_path):
    cfg = _cfg(tmp_path, SMALL)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim"), "--quiet"])
    rc = main(["reconstruct", str(tmp_path / "sim"), "--config", cfg,
               "--out", str(tmp_path / "rec"), "--quiet"])
    assert rc == EXIT_OK
    summary = json.loads((tmp_path / "rec" / "summary.json").read_text())
    assert sorted(summary["results"]) == [f"{d}_k{k}" for d in ("ideal", "lossy")
                                          for k in (0, 1, 2)]
    res = summary["results"]["ideal_k0"]
    assert res["error"]["delta_pointwise"] < 0.05
    assert res["solver"]["max_kkt_residual"] <= 1e-9
    est = read_table(tmp_path / "rec" / "estimates" / "ideal_k0.tsv", "estimate")
    assert len(est) == 11
    rc = main(["reconstruct", str(tmp_path / "sim" / "clicks" / "lossy_k1.tsv"), "--config", cfg,
               "--out", str(tmp_path / "one"), "--quiet"])
    assert rc == EXIT_OK


@pytest.mark.xfail(strict=True, reason="exact-inversion regime is out of reach in double "
                   "precision; see the decisions ledger")
def test_reconstruct_noiseless_vacuum_delta_1e6(tmp_path):
    cfg = _cfg(tmp_path, "detectors: [{kind: IdealPNR}]\noutcomes: [0]\nsolver: {gamma: 1.0e-6}\n")
    main(["reconstruct", "--config", cfg, "--out", str(tmp_path / "r"), "--quiet"])
    res = json.loads((tmp_path / "r" / "summary.json").read_text())["results"]["det0_k0"]
    assert res["error"]["delta_pointwise"] <= 1e-6


@pytest.mark.xfail(strict=True, reason="the exact lossy model moves the extrema outward; "
                   "see the decisions ledger")
def test_reconstruct_extremum_shift(tmp_path):
    main(["reconstruct", "--out", str(tmp_path / "r"), "--quiet"])
    res = json.loads((tmp_path / "r" / "summary.json").read_text())["results"]
    assert res["lossy_k1"]["fit_extrema_abs_alpha"][0] < res["ideal_k1"]["fit_extrema_abs_alpha"][0]


def test_reconstruct_error_paths(tmp_path, capsys):
    cfg = _cfg(tmp_path, SMALL)
    assert main(["reconstruct", str(tmp_path / "nope.tsv"), "--config", cfg,
                 "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_SCHEMA
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim"), "--quiet"])
    f = tmp_path / "sim" / "clicks" / "ideal_k0.tsv"
    lines = f.read_text().splitlines()
    lines[12] = lines[12].replace("\t0\t", "\tzero\t", 1)
    f.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["reconstruct", str(f), "--config", cfg, "--out", str(tmp_path / "o"),
                 "--quiet"]) == EXIT_SCHEMA
    assert "ideal_k0.tsv:13:" in capsys.readouterr().err


def test_exit_codes(tmp_path):
    assert main(["simulate", "--config", _cfg(tmp_path, "noise: {bogus: 1}\n"),
                 "--out", str(tmp_path / "x"), "--quiet"]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--quiet"]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", "--config", _cfg(tmp_path, SMALL), "--out", str(blocker / "sub"),
                 "--quiet"]) == EXIT_IO
    bad = _cfg(tmp_path, "detectors: [{kind: IdealPNR}]\noutcomes: [1]\ngrid: {count: 3}\n"
               "solver: {tol: 1.0e-30, max_iter: 1}\n", "bad.yaml")
    assert main(["reconstruct", "--config", bad, "--out", str(tmp_path / "u"),
                 "--quiet"]) == EXIT_UNUSABLE


def test_sweep_gamma(tmp_path):
    cfg = _cfg(tmp_path, "detectors: [{kind: LossyPNR, eta: 0.9, label: lossy}]\n"
                         "grid: {count: 11}\nnoise: {sigma_fraction: 0.01, iterations: 2}\n")
    with pytest.raises(SystemExit) as err:
        main(["sweep-gamma", "--config", cfg, "--gammas", "1e-3", "--quiet"])
    assert err.value.code == 2
    rc = main(["sweep-gamma", "--config", cfg, "--gammas", "0", "1e-3", "1e-2",
               "--out", str(tmp_path / "s"), "--quiet"])
    assert rc == EXIT_OK
    t = read_table(tmp_path / "s" / "sweep" / "gamma_delta.tsv", "gamma")
    assert list(t["gamma"]) == [0.0, 1e-3, 1e-2] and np.all(t["delta"] > 0)
    d = read_table(tmp_path / "s" / "sweep" / "gamma_detail.tsv", "gamma-detail")
    assert d["label"][0] == "without regularization"


def test_report(tmp_path, capsys):
    assert main(["report", str(tmp_path), "--quiet"]) == EXIT_SCHEMA
    run = tmp_path / "run"
    assert main(["reconstruct", "--config", _cfg(tmp_path, SMALL), "--out", str(run),
                 "--quiet"]) == 0
    main(["sweep-gamma", "--config", _cfg(tmp_path, SMALL + "noise: {iterations: 1}\n"),
          "--gammas", "0", "1e-3", "--out", str(run), "--quiet"])
    capsys.readouterr()
    assert main(["report", str(run), "--figures"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "without regularization" in text
    rep = run / "report"
    curves = sorted(p.name for p in rep.glob("curve_*.tsv"))
    assert len(curves) == 6
    dense = read_table(rep / "dense_lossy_k1.tsv", "dense")
    assert len(dense) == 401 and dense["alpha"][0] == -3.6 and dense["alpha"][-1] == 3.6
    g = read_table(rep / "gamma_delta.tsv", "gamma")
    assert len(g) == 2 and list(g.columns) == ["gamma", "delta"]
    assert len(list(rep.glob("*.png"))) == 7
    (run / "manifest.json").write_text("{not json")
    assert main(["report", str(run), "--quiet"]) == EXIT_SCHEMA


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "wignerqdt.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "wignerqdt" in out.stdout
    out = subprocess.run([sys.executable, "-m", "wignerqdt.cli", "simulate", "--workers", "0"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert out.returncode == 2
