"""Flat dotted-key configuration."""

import json

import pytest

from semsplat.config import ConfigError, TrainConfig, apply_overrides, from_flat, load_config, to_flat


def test_flat_round_trip():
    cfg = TrainConfig()
    assert from_flat(to_flat(cfg)) == cfg


def test_overrides_coerced():
    cfg = load_config(overrides={"drop.p_base": "2", "density.enabled": "false", "iterations": "10"})
    assert cfg.drop.p_base == 2.0 and cfg.density.enabled is False and cfg.iterations == 10


def test_file_and_override_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "lr.color": 0.1}))
    cfg = load_config(path, {"seed": 6})
    assert cfg.seed == 6 and cfg.lr.color == 0.1


@pytest.mark.parametrize(
    "overrides",
    [{"nope": 1}, {"iterations": -1}, {"iterations": 1.5}, {"drop.mode": "sometimes"}, {"gate.tau": 0}, {"lr.color": -1}],
)
def test_invalid(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_apply_overrides_copies():
    cfg = TrainConfig()
    new = apply_overrides(cfg, {"seed": 1})
    assert new.seed == 1 and cfg.seed == 42


def test_unreadable_file(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
