import csv
import json
import os

import numpy as np
import pytest

from collapsim.cli import load_trace_noise, main
from collapsim.ruin import run_to_collapse


BELL_CONFIG = {
    "schema_version": 1,
    "kind": "bell",
    "engine": "ruin",
    "trials": 300,
    "master_seed": 99,
    "epsilon": 1e-4,
    "settings": {"a": 0.0, "b": 0.7853981633974483,
                 "a_prime": 1.5707963267948966, "b_prime": 2.356194490192345},
}

SG_THRESHOLD_FULL = {
    "schema_version": 1,
    "kind": "stern-gerlach",
    "engine": "full",
    "trials": 2,
    "master_seed": 12,
    "amplitudes": [0.6324555320336759, 0.7745966692414834],
    "zeta": 1.2,
    "dt": 0.003,
    "max_steps": 2000,
    "epsilon": 0.01,
    "sg_layout": "threshold",
}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_run_writes_all_artifacts(tmp_path):
    cfg = write_config(tmp_path, BELL_CONFIG)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert "manifest.json" in names and "summary.json" in names
    trial_files = [n for n in names if n.startswith("trials_")]
    assert len(trial_files) == 4  # four CHSH setting pairs
    summary = json.loads((out / "summary.json").read_text())
    assert "chsh" in summary
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"]
    assert all(c.get("ok", True) for c in manifest["invariants"].values())
    with open(out / trial_files[0]) as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 300
    assert set(rows[0]) == {"trial", "seed", "winner", "steps"}


def test_rerun_same_seed_byte_identical(tmp_path):
    cfg = write_config(tmp_path, BELL_CONFIG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", cfg, "--out", str(out2)]) == 0
    for name in os.listdir(out1):
        if name.startswith("trials_"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    # summary is deterministic too (manifest carries timestamps, so not it)
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()


def test_seed_override_changes_outputs(tmp_path):
    cfg = write_config(tmp_path, BELL_CONFIG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", cfg, "--out", str(out2), "--seed", "123"]) == 0
    name = next(n for n in os.listdir(out1) if n.startswith("trials_"))
    assert (out1 / name).read_bytes() != (out2 / name).read_bytes()
    manifest = json.loads((out2 / "manifest.json").read_text())
    assert manifest["master_seed"] == 123


def test_unnormalized_amplitudes_exit_1(tmp_path, capsys):
    doc = {"schema_version": 1, "kind": "stern-gerlach", "engine": "ruin",
           "trials": 10, "amplitudes": [0.6, 0.6]}
    cfg = write_config(tmp_path, doc)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "not normalized" in capsys.readouterr().err


def test_malformed_json_exit_1_with_line_anchor(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "kind": oops\n}')
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "broken.json:2:" in err


def test_unknown_field_exit_1(tmp_path, capsys):
    doc = dict(BELL_CONFIG)
    doc["surprise"] = 1
    cfg = write_config(tmp_path, doc)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "unknown config fields" in capsys.readouterr().err


def test_integrator_underflow_exit_2(tmp_path, capsys):
    # a pathologically large zeta*dt makes every trial step unphysical; the
    # adaptive halving bottoms out and the run must report exit code 2
    doc = {"schema_version": 1, "kind": "stern-gerlach", "engine": "full",
           "trials": 1, "master_seed": 12,
           "amplitudes": [0.6324555320336759, 0.7745966692414834],
           "zeta": 1e7, "dt": 1.0, "max_steps": 5, "epsilon": 0.01,
           "sg_layout": "threshold", "detector": {"n_points": 12}}
    cfg = write_config(tmp_path, doc)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "weight drift" in capsys.readouterr().err


def test_timeout_rate_exit_3(tmp_path):
    doc = {"schema_version": 1, "kind": "bell", "engine": "product", "trials": 2,
           "master_seed": 21, "settings": {"a": 0.0, "b": 0.785398163397448},
           "zeta": 1.2, "dt": 0.003, "max_steps": 120, "epsilon": 0.05,
           "detector": {"n_points": 24}}
    cfg = write_config(tmp_path, doc)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_trace_rejects_ruin_engine(tmp_path, capsys):
    doc = {"schema_version": 1, "kind": "stern-gerlach", "engine": "ruin",
           "trials": 5, "amplitudes": [0.6324555320336759, 0.7745966692414834]}
    cfg = write_config(tmp_path, doc)
    assert main(["trace", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "full or product" in capsys.readouterr().err


def test_trace_full_engine_and_replay_winner(tmp_path):
    cfg = write_config(tmp_path, SG_THRESHOLD_FULL)
    out = tmp_path / "trace"
    assert main(["trace", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "trace.csv") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) > 10
    # conservation along the trace
    totals = np.array([float(r["w_0"]) + float(r["w_1"]) for r in rows])
    assert np.max(np.abs(totals - 1.0)) <= 1e-9
    # no-heating column stays at rounding level
    noheat = np.array([float(r["no_heating_rel"]) for r in rows])
    assert np.max(noheat) <= 1e-10
    # replaying the recorded pumping trace reproduces the winner
    final_w = np.array([float(rows[-1]["w_0"]), float(rows[-1]["w_1"])])
    original_winner = int(np.argmax(final_w))
    noise, w0, _ = load_trace_noise(str(out / "trace.csv"))
    res = run_to_collapse(w0, noise, zeta=1.2, dt=0.003, max_steps=len(rows) + 10,
                          epsilon=0.01)
    assert res.winner == original_winner


def test_trace_product_engine_writes_detector_trace(tmp_path):
    doc = dict(SG_THRESHOLD_FULL)
    doc["engine"] = "product"
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "trace"
    assert main(["trace", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "detector_trace.csv").exists()
    with open(out / "detector_trace.csv") as handle:
        rows = list(csv.DictReader(handle))
    assert {"step", "t", "detector", "w_0", "w_1", "x_0", "p_0"} <= set(rows[0])
    # one-detector weights start at 1
    assert float(rows[0]["w_0"]) == pytest.approx(1.0, abs=1e-9)


def test_zeta_zero_trace_is_flat(tmp_path):
    doc = dict(SG_THRESHOLD_FULL)
    doc["zeta"] = 0.0
    doc["max_steps"] = 60
    doc["epsilon"] = 1e-6
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "trace"
    assert main(["trace", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "trace.csv") as handle:
        rows = list(csv.DictReader(handle))
    w0 = np.array([float(r["w_0"]) for r in rows])
    assert np.max(np.abs(w0 - w0[0])) <= 1e-9


def test_threads_flag_reproduces_single_worker(tmp_path):
    cfg = write_config(tmp_path, BELL_CONFIG)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", cfg, "--out", str(out2), "--threads", "2"]) == 0
    for name in os.listdir(out1):
        if name.startswith("trials_") or name == "summary.json":
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_validate_fast_passes():
    assert main(["validate", "--level", "fast"]) == 0
