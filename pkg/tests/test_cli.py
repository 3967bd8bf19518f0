"""End-to-end command-line behaviour: exit codes, files, determinism."""

import json

import numpy as np
import pytest

import fpgrad as fp
from fpgrad.cli import main

BASE_CONFIG = {
    "shape": {"input_dim": 2, "layer_dims": [2, 2, 1]},
    "activation": "logistic",
    "relaxation": {"step_size": 0.1, "max_steps": 100000, "tolerance": 1e-12, "record_every": 1},
    "method": {"name": "rbp", "betas": [1e-3, 5e-4, 2.5e-4], "num_steps": 300},
    "seed": 42,
}

XOR_CONFIG = {
    "shape": {"input_dim": 2, "layer_dims": [1, 4]},
    "activation": "tanh",
    "relaxation": {"step_size": 0.25, "max_steps": 100000, "tolerance": 1e-6, "record_every": 0},
    "method": {"name": "eqprop", "beta": 1e-3},
    "seed": 42,
    "train": {"epochs": 120, "learning_rates": 0.5, "persistent_state": True},
}


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.setenv("FPGRAD_THREADS", "0")
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_config(ws, cfg, name="cfg.json"):
    p = ws / name
    p.write_text(json.dumps(cfg))
    return str(p)


def write_xor(ws):
    p = ws / "xor.csv"
    p.write_text("x0,x1,y0\n0,0,0\n0,1,1\n1,0,1\n1,1,0\n")
    return str(p)


# ---------------------------------------------------------------------------
# relax
# ---------------------------------------------------------------------------

def test_relax_converged_exit_zero(ws, capsys):
    cfg = write_config(ws, BASE_CONFIG)
    code = main(["relax", "--config", cfg, "--x", "0.3,-0.5", "--out", "out"])
    assert code == 0
    out = capsys.readouterr().out
    assert "converged=True" in out
    assert (ws / "out" / "trajectory.csv").exists()


def test_relax_zero_weight_checkpoint_decays_to_zero(ws):
    shape = fp.NetworkShape(2, (2, 1))
    theta = [np.zeros(s) for s in shape.weight_shapes()]
    fp.save_checkpoint(theta, shape, "logistic", ws / "zero.ckpt")
    cfg = dict(BASE_CONFIG)
    cfg.pop("shape")
    code = main(
        ["relax", "--config", write_config(ws, cfg), "--checkpoint", str(ws / "zero.ckpt"),
         "--x", "1.0,1.0", "--out", "out"]
    )
    assert code == 0
    rows = (ws / "out" / "trajectory.csv").read_text().splitlines()
    last_vals = [float(r.split(",")[3]) for r in rows[-3:]]
    assert all(abs(v) <= 1e-10 for v in last_vals)


def test_relax_max_steps_one_fails_without_flag(ws):
    cfg = write_config(ws, BASE_CONFIG)
    args = ["relax", "--config", cfg, "--x", "0.3,-0.5", "--max-steps", "1", "--out", "out"]
    assert main(args) == 1
    assert main(args + ["--allow-nonconverged"]) == 0


def test_relax_needs_input_vector(ws):
    cfg = write_config(ws, BASE_CONFIG)
    assert main(["relax", "--config", cfg, "--out", "out"]) == 2


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_rbp_passes(ws):
    cfg = write_config(ws, BASE_CONFIG)
    assert main(["gradcheck", "--config", cfg, "--out", "out"]) == 0
    report = json.loads((ws / "out" / "gradcheck_report.json").read_text())
    assert report["reports"][0]["passed"]
    assert report["reports"][0]["blocks"][0]["max_rel_error"] <= 1e-3


def test_gradcheck_fault_injection_fails(ws):
    cfg = write_config(ws, BASE_CONFIG)
    assert main(["gradcheck", "--config", cfg, "--inject-fault", "--out", "out"]) == 1


def test_gradcheck_eqprop_beta_pair_reports_scaling(ws):
    cfg = write_config(ws, BASE_CONFIG)
    code = main(
        ["gradcheck", "--config", cfg, "--method", "eqprop", "--beta", "1e-3,5e-4", "--out", "out"]
    )
    assert code == 0
    report = json.loads((ws / "out" / "gradcheck_report.json").read_text())
    kinds = [r["method"] for r in report["reports"]]
    assert kinds == ["eqprop", "eqprop", "eqprop-beta-scaling"]
    ratio = report["reports"][2]["error_ratios"][0]
    assert 1.5 <= ratio <= 2.5


# ---------------------------------------------------------------------------
# equivalence and sweep
# ---------------------------------------------------------------------------

def test_equivalence_gate_passes_with_slope_near_one(ws, capsys):
    cfg = dict(BASE_CONFIG)
    cfg["method"] = dict(cfg["method"], name="eqprop")
    code = main(["equivalence", "--config", write_config(ws, cfg), "--out", "out"])
    assert code == 0
    summary = json.loads((ws / "out" / "equivalence_summary.json").read_text())
    assert 0.8 <= summary["s_slope"] <= 1.2
    assert 0.8 <= summary["theta_slope"] <= 1.2
    assert (ws / "out" / "equivalence_beta0.csv").exists()


def test_equivalence_degenerate_instance_notes_and_passes(ws, capsys):
    # zero weights and a zero target put the free point exactly on target
    shape = fp.NetworkShape(2, (1,))
    theta = [np.zeros(s) for s in shape.weight_shapes()]
    fp.save_checkpoint(theta, shape, "logistic", ws / "zero.ckpt")
    (ws / "deg.csv").write_text("x0,x1,y0\n0.5,0.5,0\n")
    cfg = dict(BASE_CONFIG)
    cfg.pop("shape")
    cfg["checkpoint"] = str(ws / "zero.ckpt")
    cfg["dataset"] = str(ws / "deg.csv")
    code = main(["equivalence", "--config", write_config(ws, cfg), "--out", "out"])
    assert code == 0
    assert "degenerate" in capsys.readouterr().out


def test_equivalence_rejects_mismatched_grid(ws):
    cfg = dict(BASE_CONFIG)
    cfg["method"] = dict(cfg["method"], step_size=0.2)
    assert main(["equivalence", "--config", write_config(ws, cfg), "--out", "out"]) == 2


def test_sweep_writes_summary(ws):
    cfg = write_config(ws, BASE_CONFIG)
    assert main(["sweep", "--config", cfg, "--out", "out"]) == 0
    rows = (ws / "out" / "sweep_summary.csv").read_text().splitlines()
    assert rows[0] == "beta,max_s_gap,max_theta_gap,reference_scale"
    assert len(rows) == 4


# ---------------------------------------------------------------------------
# train and predict
# ---------------------------------------------------------------------------

def test_train_then_predict_xor(ws):
    cfg = dict(XOR_CONFIG)
    cfg["dataset"] = write_xor(ws)
    cfg_path = write_config(ws, cfg)
    assert main(["train", "--config", cfg_path, "--out", "run"]) == 0
    log_rows = (ws / "run" / "trainlog.csv").read_text().splitlines()
    assert log_rows[0] == "epoch,mean_cost,accuracy,grad_norm"
    last = log_rows[-1].split(",")
    assert float(last[1]) <= 0.05 and float(last[2]) == 1.0
    # predict from the saved checkpoint
    pcfg = dict(XOR_CONFIG)
    pcfg.pop("shape")
    pcfg["dataset"] = cfg["dataset"]
    pcfg["checkpoint"] = str(ws / "run" / "model.ckpt")
    assert main(["predict", "--config", write_config(ws, pcfg, "p.json"), "--out", "pred"]) == 0
    rows = (ws / "pred" / "predictions.csv").read_text().splitlines()
    assert rows[0] == "index,out0"
    preds = [float(r.split(",")[1]) for r in rows[1:]]
    targets = [0.0, 1.0, 1.0, 0.0]
    assert all((p >= 0.5) == (t >= 0.5) for p, t in zip(preds, targets))


def test_train_resume_matches_uninterrupted(ws):
    cfg = dict(XOR_CONFIG)
    cfg["dataset"] = write_xor(ws)
    cfg["train"] = dict(cfg["train"], epochs=8, persistent_state=False)
    cfg_path = write_config(ws, cfg)
    assert main(["train", "--config", cfg_path, "--out", "full"]) == 0
    assert main(["train", "--config", cfg_path, "--epochs", "4", "--out", "half"]) == 0
    assert (
        main(
            ["train", "--config", cfg_path, "--out", "tail",
             "--resume", str(ws / "half" / "model.ckpt"), "--start-epoch", "4"]
        )
        == 0
    )
    assert (ws / "full" / "model.ckpt").read_bytes() == (ws / "tail" / "model.ckpt").read_bytes()


def test_train_divergence_reports_epoch(ws, capsys):
    cfg = dict(XOR_CONFIG)
    cfg["dataset"] = write_xor(ws)
    cfg["train"] = dict(cfg["train"], learning_rates=1e9, epochs=5)
    code = main(["train", "--config", write_config(ws, cfg), "--out", "run"])
    assert code == 1
    err = capsys.readouterr().err
    assert "epoch" in err


# ---------------------------------------------------------------------------
# config validation and determinism
# ---------------------------------------------------------------------------

def test_unknown_config_key_rejected(ws):
    cfg = dict(BASE_CONFIG)
    cfg["surprise"] = 1
    assert main(["relax", "--config", write_config(ws, cfg), "--x", "0,0"]) == 2


def test_unknown_nested_key_rejected(ws):
    cfg = dict(BASE_CONFIG)
    cfg["relaxation"] = dict(cfg["relaxation"], stepsize=0.1)
    assert main(["relax", "--config", write_config(ws, cfg), "--x", "0,0"]) == 2


def test_missing_dataset_path_rejected(ws):
    cfg = dict(BASE_CONFIG)
    cfg["dataset"] = "nowhere.csv"
    assert main(["gradcheck", "--config", write_config(ws, cfg)]) == 2


def test_invalid_json_rejected(ws):
    p = ws / "bad.json"
    p.write_text("{not json")
    assert main(["relax", "--config", str(p), "--x", "0,0"]) == 2


def test_usage_error_exit_code():
    assert main(["no-such-command"]) == 2


def test_reruns_are_byte_identical(ws):
    cfg = write_config(ws, BASE_CONFIG)
    for out in ("a", "b"):
        assert main(["relax", "--config", cfg, "--x", "0.3,-0.5", "--out", out]) == 0
        assert main(["gradcheck", "--config", cfg, "--out", out]) == 0
    for name in ("trajectory.csv", "gradcheck_report.json"):
        assert (ws / "a" / name).read_bytes() == (ws / "b" / name).read_bytes()
