#!/usr/bin/env python3
"""
Tests for TOML configuration, environment overrides and the command line.
"""

import json
import os

import pytest

import config
from config import ConfigError, load_config, parse_config, worker_count
from data_io import SynthConfig, load_dataset, save_sequence, synth_sequence
from model import ModelConfig, init_params
from ost import main


def test_parse_config_sections():
    cfg = parse_config({"model": {"feat_dim": 8, "mfa_samples": [8, 16], "n_template": 16, "n_search": 32,
                                  "bev_grid": {"x_range": [-1.2, 1.2], "y_range": [-1.2, 1.2]}},
                        "loss": {"lambda_z": 1.0}})
    assert cfg.model.feat_dim == 8 and cfg.model.mfa_samples == (8, 16)
    assert (cfg.model.bev_grid.ny, cfg.model.bev_grid.nx) == (8, 8)
    assert cfg.loss.lambda_z == 1.0 and cfg.loss.lambda_seg == 1.0
    assert cfg.train.steps == 2000


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config({"optimizer": {}})
    with pytest.raises(ConfigError, match=r"\[train\] unknown key"):
        parse_config({"train": {"epochs": 3}})
    with pytest.raises(ConfigError, match=r"\[model\]"):
        parse_config({"model": {"feat_dim": 6}})


def test_load_config_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("OST_CONFIG", raising=False)
    assert load_config().source is None

    path = tmp_path / "run.toml"
    path.write_text('[tracker]\ntemplate_mode = "previous"\n\n[eval]\niou_mode = "bev"\n')
    cfg = load_config(str(path))
    assert cfg.tracker.template_mode == "previous" and cfg.eval.iou_mode == "bev"

    monkeypatch.setenv("OST_CONFIG", str(path))
    assert load_config().source == str(path)

    (tmp_path / "broken.toml").write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "broken.toml"))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.toml"))


def test_repository_config_parses():
    cfg = load_config(os.path.join(os.path.dirname(os.path.abspath(__file__)), "ost_config.toml"))
    assert cfg.model.n_search == 1024 and cfg.model.bev_grid.nx == 32


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("OST_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("OST_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("OST_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("OST_LOG_LEVEL", "debug")
    assert config.log_level() == "DEBUG"


def test_cli_synth_writes_sequence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("OST_CONFIG", raising=False)
    out = tmp_path / "seq7"
    assert main(["--seed", "7", "synth", "--frames", "5", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["frames"]) == 5
    [seq] = load_dataset(str(out))
    assert seq.id == "synth-car-0007" and len(seq) == 5


def test_cli_eval_roundtrip(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("OST_CONFIG", raising=False)
    data = tmp_path / "data"
    assert main(["synth", "--frames", "4", "--count", "2", "--out", str(data)]) == 0
    preds = tmp_path / "preds.jsonl"
    with open(preds, "w", encoding="utf-8") as f:
        for seq in load_dataset(str(data)):
            for t, frame in enumerate(seq.frames):
                f.write(json.dumps({"seq": seq.id, "frame": t, "box": frame.gt.to_array(), "ms": 0.0}) + "\n")
    assert main(["eval", "--preds", str(preds), "--data", str(data), "--out", str(tmp_path / "m.json")]) == 0
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert metrics["success"] == pytest.approx(100.0) and metrics["precision"] == pytest.approx(100.0)
    assert "Success" in capsys.readouterr().out


def test_cli_failures_return_nonzero(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["eval", "--data", str(tmp_path / "missing"), "--preds", "p.jsonl"]) == 1
    assert main(["--config", str(tmp_path / "nope.toml"), "bench", "--desk"]) == 1
    with pytest.raises(SystemExit):
        main(["unknown-command"])


def test_cli_class_agnostic_eval(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("OST_CONFIG", raising=False)
    data = tmp_path / "data"
    for i, category in enumerate(("Car", "Van")):
        for scene in (3, 19):
            synth_cfg = SynthConfig(n_frames=3, size=(0.8, 0.5, 0.6), density=150.0, speed=(0.05, 0.1),
                                    n_distractors=0, ground_points=20, scene_margin=1.0, seed=10 * i + scene,
                                    category=category, scene=scene)
            save_sequence(synth_sequence(synth_cfg), str(data / f"{category}_{scene:02d}"), synth_cfg)
    run = tmp_path / "run"
    init_params(ModelConfig.desk(), seed=0).save(str(run / "checkpoint"))
    train_ids = [s.id for s in load_dataset(str(data)) if s.category == "Van" and s.scene == 3]
    (run / "training_manifest.json").write_text(json.dumps({"categories": ["Van"], "sequence_ids": train_ids}))
    (tmp_path / "desk.toml").write_text("[tracker]\nsearch_margin = 0.5\n")

    out = tmp_path / "metrics.json"
    assert main(["--config", str(tmp_path / "desk.toml"), "eval", "--split", "class-agnostic", "--setting", "1",
                 "--checkpoint", str(run / "checkpoint"), "--data", str(data), "--out", str(out)]) == 0
    metrics = json.loads(out.read_text())
    assert metrics["setting"] == "setting-1"
    assert set(metrics["unseen"]["per_category"]) == {"Car"}
    assert set(metrics["observed"]["per_category"]) == {"Van"}
    assert "unseen" in capsys.readouterr().out
