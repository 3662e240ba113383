import inspect
import json

import pytest

import config_manager
from config_manager import (
    ConfigError,
    RunConfig,
    apply_overrides,
    default_config,
    load_config,
    parse_horizon,
    save_config,
    validate_config,
)
from sparse_trainer import train


def test_defaults_are_valid():
    cfg = default_config()
    assert validate_config(cfg) == (True, [])
    assert (cfg.death_rate, cfg.update_frequency, cfg.epochs, cfg.batch_size) == (0.5, 1000, 200, 242)


def test_round_trip(tmp_path):
    cfg = RunConfig(mode="gat", sparsity=0.0, seed=7, split=(0.6, 0.2, 0.2), learning_rate=0.003)
    path = save_config(cfg, str(tmp_path / "config.json"))
    assert load_config(path) == cfg


def test_partial_file_overlays_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"mode": "gat", "sparsity": 0}), encoding="utf-8")
    cfg = load_config(str(path))
    assert cfg.mode == "gat" and cfg.sparsity == 0.0 and isinstance(cfg.sparsity, float)
    assert cfg.epochs == default_config().epochs


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"sparsty": 0.5}), encoding="utf-8")
    with pytest.raises(ConfigError, match="sparsty"):
        load_config(str(path))


@pytest.mark.parametrize("content", ["[1, 2]", "{not json", ""])
def test_unreadable_files(tmp_path, content):
    path = tmp_path / "cfg.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.json"))


def test_validate_collects_every_issue():
    cfg = RunConfig(mode="rnn", sparsity=1.0, death_rate=0.0, split=(0.5, 0.5, 0.5))
    ok, issues = validate_config(cfg)
    assert not ok
    assert len(issues) == 4


def test_gat_heads_must_divide_width():
    ok, issues = validate_config(RunConfig(mode="gat", spatial_width=10, gat_heads=4))
    assert not ok and "divisible" in issues[0]


def test_apply_overrides():
    cfg = apply_overrides(default_config(), {"sparsity": 0.5, "mode": None, "split": "0.8,0.1,0.1"})
    assert cfg.sparsity == 0.5 and cfg.mode == "gcn"
    assert cfg.split == (0.8, 0.1, 0.1)
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"epochs": -1})
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"batch_size": 2.5})


@pytest.mark.parametrize("text, steps", [("45min", 9), ("15min", 3), ("1h", 12), ("9", 9), ("60m", 12)])
def test_parse_horizon(text, steps):
    assert parse_horizon(text, 5) == steps


@pytest.mark.parametrize("text", ["7min", "0", "soon", "-5min"])
def test_parse_horizon_errors(text):
    with pytest.raises(ConfigError):
        parse_horizon(text, 5)


def test_learning_rate_default_matches_trainer():
    assert default_config().learning_rate == 1e-3
    assert inspect.signature(train).parameters["learning_rate"].default == default_config().learning_rate


def test_command_keys_round_trip(tmp_path):
    cfg = apply_overrides(default_config(), {
        "synth_shifts": "seasonal-amplitude, demand-drop",
        "sweep_grid": "0,0.5,0.9",
        "checkpoints": ["a/checkpoint.json", "b/checkpoint.json"],
        "synth_nodes": 8,
        "parallel": 2,
    })
    assert cfg.synth_shifts == ("seasonal-amplitude", "demand-drop")
    assert cfg.sweep_grid == (0.0, 0.5, 0.9)
    assert cfg.checkpoints == ("a/checkpoint.json", "b/checkpoint.json")
    saved = json.loads(open(save_config(cfg, str(tmp_path / "c.json")), encoding="utf-8").read())
    assert saved["sweep_grid"] == [0.0, 0.5, 0.9]
    assert load_config(str(tmp_path / "c.json")) == cfg


@pytest.mark.parametrize("overrides", [
    {"synth_shifts": "snow"},
    {"synth_topology": "star"},
    {"sweep_grid": "0.5,1.0"},
    {"parallel": 0},
    {"flops_edges": -2},
])
def test_command_keys_validated(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), overrides)


def test_default_config_file_is_used_when_present(tmp_path, monkeypatch):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"epochs": 7}), encoding="utf-8")
    monkeypatch.setattr(config_manager, "CONFIG_FILE", str(path))
    assert load_config().epochs == 7
    monkeypatch.setattr(config_manager, "CONFIG_FILE", str(tmp_path / "absent.json"))
    assert load_config() == default_config()
