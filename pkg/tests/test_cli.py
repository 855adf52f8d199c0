import json

import numpy as np
import pytest
import torch

import kglnet.trainer as trainer_mod
from kglnet.cli import main

torch.set_num_threads(1)

TINY_TRAIN = [
    "--arch", "A1", "--channel-scale", "0.125", "--batch-size", "8",
    "--epochs", "1", "--seed", "0",
]


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def make_pack(capsys, path, n=24, **extra):
    argv = ["synth", "--out", str(path), "--n-pairs", str(n), "--seed", "7"]
    for key, value in extra.items():
        argv += [f"--{key.replace('_', '-')}", str(value)]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    return out


def test_version(capsys):
    code, out, err = run(capsys, "--version")
    assert code == 0
    assert "kglnet" in out + err


def test_synth_is_byte_deterministic(tmp_path, capsys):
    out1 = make_pack(capsys, tmp_path / "p1")
    out2 = make_pack(capsys, tmp_path / "p2")
    for f in ("a.bin", "b.bin", "labels.csv", "manifest.json"):
        assert (tmp_path / "p1" / f).read_bytes() == (tmp_path / "p2" / f).read_bytes()
    assert "digest" in out1 and out1.split("digest")[1] == out2.split("digest")[1]


def test_synth_scene_flags_reach_generator(tmp_path, capsys):
    make_pack(capsys, tmp_path / "p", n=12, pairs_per_scene=4)
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert "pairs_per_scene=4" in manifest["provenance"]


def test_train_eval_cycle(tmp_path, capsys):
    make_pack(capsys, tmp_path / "pack", n=24)
    run_dir = tmp_path / "run"
    code, out, _ = run(
        capsys, "train", "--data", str(tmp_path / "pack"), "--out", str(run_dir), *TINY_TRAIN
    )
    assert code == 0
    assert "trained 3 steps" in out  # 24 pairs / batch 8
    for f in ("run_manifest.json", "result.json", "final.ckpt", "train_log.csv"):
        assert (run_dir / f).exists(), f

    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    assert manifest["format"] == "kglnet-run-v1"
    assert manifest["config"]["train"]["epochs"] == 1
    assert manifest["inputs"]["data"]["n_pairs"] == 24
    assert "timestamp" not in manifest  # manifests must be rerun-stable

    eval_dir = tmp_path / "ev"
    code, out, _ = run(
        capsys, "eval", "--ckpt", str(run_dir / "final.ckpt"),
        "--data", str(tmp_path / "pack"), "--out", str(eval_dir),
    )
    assert code == 0
    assert "FPR95" in out
    assert (eval_dir / "report.json").exists()
    assert list(eval_dir.glob("scores_*.csv")) and list(eval_dir.glob("roc_*.csv"))


def test_config_file_then_flags_precedence(tmp_path, capsys):
    make_pack(capsys, tmp_path / "pack", n=24)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "train": {
            "epochs": 2, "batch_size": 8, "seed": 3,
            "architecture": {"preset": "A1", "channel_scale": 0.125},
        }
    }))
    run_dir = tmp_path / "run"
    code, _, _ = run(
        capsys, "train", "--data", str(tmp_path / "pack"), "--out", str(run_dir),
        "--config", str(cfg), "--epochs", "1",
    )
    assert code == 0
    resolved = json.loads((run_dir / "run_manifest.json").read_text())["config"]["train"]
    assert resolved["epochs"] == 1  # flag beats file
    assert resolved["seed"] == 3  # file beats default
    assert resolved["architecture"]["name"] == "A1"

    # a finished run's manifest is itself a valid config source
    rerun_dir = tmp_path / "rerun"
    code, _, _ = run(
        capsys, "train", "--data", str(tmp_path / "pack"), "--out", str(rerun_dir),
        "--config", str(run_dir / "run_manifest.json"),
    )
    assert code == 0
    again = json.loads((rerun_dir / "run_manifest.json").read_text())["config"]["train"]
    assert again == resolved


def test_unknown_config_section_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trian": {}}))
    code, _, err = run(
        capsys, "train", "--data", str(tmp_path), "--config", str(cfg),
    )
    assert code == 2
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["exit_code"] == 2 and "trian" in doc["message"]


def test_unknown_train_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    code, _, err = run(capsys, "train", "--data", str(tmp_path), "--config", str(cfg))
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_missing_pack_is_data_error(tmp_path, capsys):
    code, _, err = run(
        capsys, "train", "--data", str(tmp_path / "nope"), *TINY_TRAIN
    )
    assert code == 3
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["exit_code"] == 3


def test_divergence_exits_4_and_writes_error_json(tmp_path, capsys, monkeypatch):
    make_pack(capsys, tmp_path / "pack", n=24)
    monkeypatch.setattr(
        trainer_mod, "metric_loss",
        lambda logits, labels: torch.tensor(float("nan")),
    )
    run_dir = tmp_path / "run"
    code, _, err = run(
        capsys, "train", "--data", str(tmp_path / "pack"), "--out", str(run_dir), *TINY_TRAIN
    )
    assert code == 4
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["error"] == "DivergenceError"
    assert doc["component"] == "metric"
    assert doc["exit_code"] == 4
    on_disk = json.loads((run_dir / "error.json").read_text())
    assert on_disk == doc


def test_inspect_json(capsys):
    code, out, _ = run(capsys, "inspect", "--arch", "C3", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["total_parameters"] == 7_059_408
    assert doc["architecture"]["name"] == "C3"
    assert len(doc["aliased_groups"]) == 8
    code, _, err = run(capsys, "inspect")
    assert code == 2


def test_default_out_dir_under_env_root(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("KGLNET_OUTPUT_ROOT", str(tmp_path / "root"))
    make_pack(capsys, tmp_path / "pack", n=24)
    code, out, _ = run(capsys, "train", "--data", str(tmp_path / "pack"), *TINY_TRAIN)
    assert code == 0
    runs = list((tmp_path / "root").glob("train-A1-s0-*"))
    assert len(runs) == 1 and (runs[0] / "final.ckpt").exists()


def test_sweep_csv(tmp_path, capsys):
    make_pack(capsys, tmp_path / "pack", n=24)
    out_dir = tmp_path / "sw"
    code, out, _ = run(
        capsys, "sweep", "--data", str(tmp_path / "pack"), "--archs", "A1",
        "--seeds", "0", "--out", str(out_dir), *TINY_TRAIN,
    )
    assert code == 0
    lines = (out_dir / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "arch,use_hnsm,seed,fpr95_percent,status"
    assert len(lines) == 3  # mining on + off
    for line in lines[1:]:
        arch, use_hnsm, seed, value, status = line.split(",")
        assert arch == "A1" and status == "ok"
        float(value)


def test_ablate_csv(tmp_path, capsys):
    make_pack(capsys, tmp_path / "pack", n=24)
    out_dir = tmp_path / "ab"
    code, out, _ = run(
        capsys, "ablate", "--data", str(tmp_path / "pack"), "--seeds", "1",
        "--out", str(out_dir), *TINY_TRAIN,
    )
    assert code == 0
    lines = (out_dir / "ablation.csv").read_text().strip().splitlines()
    assert lines[0] == "variant,seed,fpr95_percent,status"
    variants = [line.split(",")[0] for line in lines[1:]]
    assert variants == ["metric_only", "combined", "combined_mining", "full"]
    assert all(line.endswith("ok") for line in lines[1:])
