import json

import pytest

from ckmflow import config


def test_defaults_roundtrip(tmp_path):
    cfg = config.RunConfig()
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert config.load_config(p) == cfg
    assert config.load_config(None) == cfg


def test_partial_override():
    cfg = config.from_dict({"seed": 5, "train": {"epochs": 3}, "scene": {"n_buildings": 2}})
    assert cfg.seed == 5 and cfg.train.epochs == 3 and cfg.train.lr == config.TrainSection().lr
    assert cfg.scene.n_buildings == 2


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"train": {"epochs": 3, "momentum": 0.9}},
    {"propagation": {"exponent": 2.0, "colour": "red"}},
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(config.ConfigError, match="unknown key"):
        config.from_dict(doc)


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(config.ConfigError):
        config.from_dict({"degradation": {"mask_mode": "guess"}})
    with pytest.raises(config.ConfigError):
        config.from_dict({"train": 3})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(config.ConfigError):
        config.load_config(bad)


def test_json_is_sorted_and_stable():
    s = config.RunConfig().to_json()
    assert s == config.RunConfig().to_json()
    assert list(json.loads(s)) == sorted(json.loads(s))


def test_depth_per_task():
    n = config.NetSection()
    assert n.depth_for("a") == 2 and n.depth_for("b") == 1
    assert config.NetSection(depth=3).depth_for("b") == 3
