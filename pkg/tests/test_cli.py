import json

import numpy as np
import pytest

from spdectl import storage
from spdectl.cli import main


def write_config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


SMALL_PROBLEM = {
    "kind": "reaction-diffusion", "n": 16, "frames": 3, "fine_per_frame": 2,
}


def test_invalid_json_exits_2(tmp_path, capsys):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{ not json }")
    code = main(["generate", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 2
    assert "line 1" in capsys.readouterr().err


def test_missing_required_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"problem": SMALL_PROBLEM})
    code = main(["generate", "--config", cfg, "--out", str(tmp_path)])
    assert code == 2
    assert "dataset.count" in capsys.readouterr().err


def test_wrong_type_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {
        "problem": SMALL_PROBLEM, "dataset": {"count": "many"}})
    code = main(["generate", "--config", cfg, "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "dataset.count" in err and "int" in err


def test_generate_writes_dataset_with_config_hash(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", {
        "problem": SMALL_PROBLEM, "dataset": {"count": 2, "seed": 5}})
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    ds = storage.read_dataset(out / "dataset.spdd")
    assert len(ds) == 2
    assert ds.config_hash[:12] in capsys.readouterr().out


def test_generate_threads_identical_bytes(tmp_path):
    cfg = write_config(tmp_path / "c.json", {
        "problem": SMALL_PROBLEM, "dataset": {"count": 3, "seed": 5}})
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["generate", "--config", cfg, "--out", str(out1),
                 "--threads", "1"]) == 0
    assert main(["generate", "--config", cfg, "--out", str(out2),
                 "--threads", "3"]) == 0
    assert (out1 / "dataset.spdd").read_bytes() == (out2 / "dataset.spdd").read_bytes()


def test_bench_without_checkpoints_exits_1(tmp_path, capsys):
    out = tmp_path / "run"
    gen_cfg = write_config(tmp_path / "g.json", {
        "problem": SMALL_PROBLEM, "dataset": {"count": 2, "seed": 5}})
    main(["generate", "--config", gen_cfg, "--out", str(out)])
    bench_cfg = write_config(tmp_path / "b.json", {
        "data": str(out / "dataset.spdd"),
        "models": [{"name": "ghost", "surrogate": str(out / "missing.spdm")}],
        "bench": {"tasks": 1, "n_noise": 1},
    })
    code = main(["bench", "--config", bench_cfg, "--out", str(out)])
    assert code == 1
    err = capsys.readouterr().err
    assert "missing.spdm" in err and "ghost" in err


def test_full_pipeline_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    gen_cfg = write_config(tmp_path / "g.json", {
        "problem": SMALL_PROBLEM, "dataset": {"count": 6, "seed": 5}})
    assert main(["generate", "--config", gen_cfg, "--out", str(out)]) == 0

    train_cfg = write_config(tmp_path / "t.json", {
        "data": str(out / "dataset.spdd"),
        "surrogate": {"backbone": "conv", "channels": 6, "layers": 2, "seed": 0},
        "train": {"lr": 0.002, "batch_size": 8, "epochs": 4, "seed": 0},
    })
    assert main(["train-surrogate", "--config", train_cfg, "--out", str(out)]) == 0
    assert (out / "rf-conv.spdm").exists()
    assert (out / "rf-conv_loss.csv").read_text().startswith("step,loss")

    policy_cfg = write_config(tmp_path / "p.json", {
        "data": str(out / "dataset.spdd"),
        "surrogate": str(out / "rf-conv.spdm"),
        "policy": {"hidden": [16, 8], "lr": 0.002, "batch_tasks": 2,
                   "n_noise": 1, "iterations": 3, "alpha": 0.01, "seed": 0},
    })
    assert main(["train-policy", "--config", policy_cfg, "--out", str(out)]) == 0
    assert (out / "policy.spdm").exists()

    control_cfg = write_config(tmp_path / "ctl.json", {
        "data": str(out / "dataset.spdd"),
        "policy": str(out / "policy.spdm"),
        "bench": {"tasks": 2, "n_noise": 1},
    })
    assert main(["control", "--config", control_cfg, "--out", str(out)]) == 0
    events = (out / "control_events.jsonl").read_text().strip().splitlines()
    assert len(events) == 2 * 2        # two tasks, two frames each
    assert all("tracking_error" in json.loads(e) for e in events)

    bench_cfg = write_config(tmp_path / "b.json", {
        "data": str(out / "dataset.spdd"),
        "models": [{"name": "rf-conv", "surrogate": str(out / "rf-conv.spdm"),
                    "policy": str(out / "policy.spdm")}],
        "bench": {"tasks": 2, "n_noise": 1, "open_loop_iterations": 5},
    })
    assert main(["bench", "--config", bench_cfg, "--out", str(out)]) == 0
    metrics = (out / "bench_metrics.csv").read_text().splitlines()
    assert metrics[0] == "model,method,e,e_track,e_energy"
    assert len(metrics) == 4           # zero + open-loop + policy
    assert (out / "bench_timing.csv").exists()

    ablate_cfg = write_config(tmp_path / "ab.json", {
        "data": str(out / "dataset.spdd"),
        "models": [{"name": "rf-conv", "surrogate": str(out / "rf-conv.spdm"),
                    "policy": str(out / "policy.spdm")}],
        "bench": {"tasks": 1, "n_noise": 1, "open_loop_iterations": 3},
        "ablation": {"mode": "control", "sigmas": [0.05, 1.0]},
    })
    assert main(["ablate", "--config", ablate_cfg, "--out", str(out)]) == 0
    rows = (out / "ablation_control.csv").read_text().splitlines()
    assert rows[0] == "sigma,model,method,e,e_track,e_energy"
    assert len(rows) == 5              # 2 sigmas x (open-loop + policy)


def test_ablate_modeling_smoke(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "a.json", {
        "problem": SMALL_PROBLEM,
        "surrogate": {"backbone": "conv", "channels": 6, "layers": 2},
        "train": {"lr": 0.002, "batch_size": 8, "epochs": 2},
        "ablation": {"mode": "modeling", "sigmas": [0.05, 0.5], "seeds": [0],
                     "train_count": 4, "test_count": 2},
    })
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "ablation_modeling.csv").read_text().splitlines()
    assert rows[0] == "sigma,model,seed,u1_onestep,prediction"
    assert len(rows) == 5              # 2 sigmas x 2 variants x 1 seed


def test_unknown_backbone_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {
        "data": "x.spdd",
        "surrogate": {"backbone": "transformer"},
    })
    code = main(["train-surrogate", "--config", cfg, "--out", str(tmp_path)])
    assert code == 2
    assert "backbone" in capsys.readouterr().err
