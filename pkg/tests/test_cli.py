import hashlib
import io
import json

import numpy as np
import pytest

from rdoe.cli import main
from rdoe.estimation import Dataset
from rdoe.evaluation import StrategyBench
from rdoe.errors import RdoeError
from rdoe.models import CASE1, CASE2, model_values
from rdoe.protocols import SimulatedPlant, StopConfig, run_sequential

from conftest import BOXES, SIGMA


def write_cfg(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_design_case1_nominal(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case1"})
    before = sha(tmp_path / "c.json")
    assert main(["design", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    d = json.loads((tmp_path / "o" / "design.json").read_text(encoding="utf-8"))
    np.testing.assert_allclose(np.ravel(d["controls"]), [1.0, 1.0], atol=1e-4)
    rep = json.loads((tmp_path / "o" / "design_report.json").read_text(encoding="utf-8"))
    assert rep["strategy"] == "nominal" and rep["objective"] > 0
    assert "local_minima" in rep and "design_seconds" in rep["timings"]
    meta = json.loads((tmp_path / "o" / "meta.json").read_text(encoding="utf-8"))
    assert meta["command"] == "design"
    # every defaulted field is echoed
    for key in ("solver", "criterion", "alpha", "seed", "scenarios", "sigma", "box"):
        assert key in meta["config"]
    assert sha(tmp_path / "c.json") == before


def test_design_rerun_from_meta_is_byte_identical(tmp_path):
    assert main(["design", "--preset", "case2", "--out", str(tmp_path / "a")]) == 0
    meta = str(tmp_path / "a" / "meta.json")
    assert main(["design", "--config", meta, "--out", str(tmp_path / "b")]) == 0
    assert sha(tmp_path / "a" / "design.json") == sha(tmp_path / "b" / "design.json")


def test_design_case3_table_row(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case3", "p_hat": [0.55, 0.275]})
    assert main(["design", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    d = json.loads((tmp_path / "o" / "design.json").read_text(encoding="utf-8"))
    np.testing.assert_allclose(sorted(np.ravel(d["controls"])), [1.22, 1.22, 1.22, 6.46], atol=0.02)


def test_design_two_stage_writes_staged_design(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case1", "strategy": "two_stage",
                                          "solver": {"n_starts": 4}})
    assert main(["design", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    d = json.loads((tmp_path / "o" / "design.json").read_text(encoding="utf-8"))
    assert d["kind"] == "staged_design"
    first, second = d["stages"]
    # path-wise layout: every scenario carries the shared block, then its own recourse
    assert len(first) == 3 and len(second) == 3
    assert all(node["controls"] == first[0]["controls"] for node in first)


def test_malformed_json_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "N": ,\n}', encoding="utf-8")
    assert main(["design", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "bad.json:2:8: invalid JSON" in err


def test_invalid_config_values_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case2", "N_e": 9})
    assert main(["design", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "exceeds" in capsys.readouterr().err


def test_mc_zero_trials_exit_2(tmp_path):
    assert main(["mc", "--preset", "case1", "--n-trials", "0", "--out", str(tmp_path / "o")]) == 2


def test_mc_rerun_byte_identical(tmp_path, monkeypatch, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case1", "mc": {"n_trials": 3}})
    assert main(["mc", "--config", cfg, "--seed", "5", "--threads", "1",
                 "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("RDOE_THREADS", "3")
    assert main(["mc", "--config", cfg, "--seed", "5", "--threads", "1",
                 "--out", str(tmp_path / "b")]) == 0
    meta = json.loads((tmp_path / "b" / "meta.json").read_text(encoding="utf-8"))
    assert meta["config"]["threads"] == 3
    for name in ("trials.csv", "boxplot.csv", "dominance.csv", "stats.json"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name), name
    out = capsys.readouterr().out
    assert "two_stage" in out


def test_mc_all_trials_failed_exit_3(tmp_path, monkeypatch):
    def boom(self, strategy, p_true, seed):
        raise RdoeError("injected")

    monkeypatch.setattr(StrategyBench, "applied_design", boom)
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case1", "mc": {
        "n_trials": 2, "strategies": ["nominal"], "dominance_pair": None}})
    assert main(["mc", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_estimate_noiseless_case2(tmp_path):
    p = np.array([1.2, 0.8])
    u = np.array([[0.5], [1.0], [3.0], [20.0]])
    Dataset(u, model_values(CASE2, p, u), SIGMA).to_csv(tmp_path / "d.csv")
    cfg = write_cfg(tmp_path / "c.json", {"preset": "case2"})
    assert main(["estimate", "--config", cfg, "--data", str(tmp_path / "d.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    est = json.loads((tmp_path / "o" / "estimate.json").read_text(encoding="utf-8"))
    np.testing.assert_allclose(est["p_hat"], p, atol=1e-4)
    lines = (tmp_path / "o" / "ellipse.csv").read_text(encoding="utf-8").splitlines()
    assert len([ln for ln in lines if ln and not ln.startswith("#")]) > 100


def test_estimate_underdetermined_exit_2(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("u_1,y_1\n1.0,0.5\n", encoding="utf-8")
    assert main(["estimate", "--preset", "case2", "--data", str(tmp_path / "d.csv"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "rdoe: error" in capsys.readouterr().err


def test_estimate_case1_two_points_matches_grid(tmp_path):
    (tmp_path / "d.csv").write_text("u_1,y_1\n0.8,0.62\n1.3,0.71\n", encoding="utf-8")
    assert main(["estimate", "--preset", "case1", "--data", str(tmp_path / "d.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    est = json.loads((tmp_path / "o" / "estimate.json").read_text(encoding="utf-8"))
    grid = np.linspace(0.5, 1.5, 200001)
    sse = (0.62 - (1 - np.exp(-grid * 0.8))) ** 2 + (0.71 - (1 - np.exp(-grid * 1.3))) ** 2
    assert est["p_hat"][0] == pytest.approx(grid[np.argmin(sse)], abs=1e-5)


def _session_cfg(tmp_path, **session):
    doc = {"preset": "case1", "N": 4, "seed": 7,
           "session": dict({"strategy": "sequential", "N_e_step": 1}, **session)}
    return write_cfg(tmp_path / "s.json", doc)


def _reference_history(stop=None):
    plant = SimulatedPlant(CASE1, [1.4], SIGMA, seed=7)
    return run_sequential(CASE1, BOXES["case1"], [1.0], 4, 1, plant, SIGMA, stop_cfg=stop)


def test_session_piped_matches_programmatic_loop(tmp_path, monkeypatch, capsys):
    hist = _reference_history()
    lines = ["garbage,line"] + [f"{float(r.measurements[0, 0])!r}" for r in hist]
    monkeypatch.setattr("sys.stdin", io.StringIO("\n".join(lines) + "\n"))
    assert main(["session", "--config", _session_cfg(tmp_path), "--out", str(tmp_path / "o")]) == 0
    captured = capsys.readouterr()
    assert "malformed measurement line" in captured.err
    assert "experiment budget used; session complete" in captured.out
    doc = json.loads((tmp_path / "o" / "session.json").read_text(encoding="utf-8"))
    assert doc["history"] == [r.to_dict() for r in hist]


def test_session_resume_continues_deterministically(tmp_path, monkeypatch, capsys):
    hist = _reference_history()
    ys = [f"{float(r.measurements[0, 0])!r}" for r in hist]
    meas = tmp_path / "first.txt"
    meas.write_text("\n".join(ys[:2]) + "\n", encoding="utf-8")
    cfg = _session_cfg(tmp_path)
    assert main(["session", "--config", cfg, "--measurements", str(meas),
                 "--out", str(tmp_path / "o")]) == 0
    assert "input ended" in capsys.readouterr().out
    saved = tmp_path / "o" / "session.json"
    assert len(json.loads(saved.read_text(encoding="utf-8"))["blocks"]) == 2
    rest = tmp_path / "rest.txt"
    rest.write_text("\n".join(ys[2:]) + "\n", encoding="utf-8")
    resume = tmp_path / "resume.json"
    resume.write_bytes(saved.read_bytes())
    assert main(["session", "--config", cfg, "--measurements", str(rest), "--resume", str(resume),
                 "--out", str(tmp_path / "o2")]) == 0
    doc = json.loads((tmp_path / "o2" / "session.json").read_text(encoding="utf-8"))
    assert doc["history"] == [r.to_dict() for r in hist]


def test_session_resume_mismatch_exit_2(tmp_path):
    bogus = tmp_path / "bogus.json"
    bogus.write_text(json.dumps({"blocks": [{"controls": [[7.0]], "measurements": [[0.5]]}]}),
                     encoding="utf-8")
    (tmp_path / "m.txt").write_text("", encoding="utf-8")
    assert main(["session", "--config", _session_cfg(tmp_path), "--resume", str(bogus),
                 "--measurements", str(tmp_path / "m.txt"), "--out", str(tmp_path / "o")]) == 2


def test_session_rel_tol_stop_message(tmp_path, monkeypatch, capsys):
    hist = _reference_history(StopConfig(rel_tol=0.4))
    assert hist[-1].stop_reason == "rel_tol" and len(hist) < 4
    lines = [f"{float(r.measurements[0, 0])!r}" for r in _reference_history()]
    monkeypatch.setattr("sys.stdin", io.StringIO("\n".join(lines) + "\n"))
    assert main(["session", "--config", _session_cfg(tmp_path, rel_tol=0.4),
                 "--out", str(tmp_path / "o")]) == 0
    assert "stopping rule 'rel_tol' triggered; session complete" in capsys.readouterr().out
    doc = json.loads((tmp_path / "o" / "session.json").read_text(encoding="utf-8"))
    assert doc["history"] == [r.to_dict() for r in hist]
