import json

import pytest

from tevit import config
from tevit.core.errors import ConfigError


def test_defaults_mirror_reference_recipe():
    run = config.from_dict({}, env={})
    assert run.optim.base_lr == 0.00025 and run.optim.weight_decay == 0.0001
    assert run.optim.backbone_lr_mult == 0.1 and run.optim.clip_norm == 0.1
    assert run.train.clip_len == 5
    assert run.optim.decay_fractions == (8 / 12, 11 / 12)
    assert run.loss.lambda_cls == 2 and run.loss.lambda_L1 == 5 and run.loss.lambda_dice == 8


def test_linear_lr_scaling():
    run = config.from_dict({"optim": {"batch_size": 4}}, env={})
    assert run.optim.lr == pytest.approx(0.00025 * 4 / 16)


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"model": {"chanels": [1, 2, 3, 4]}},
    {"optim": {"base_lr": "fast"}},
    {"optim": {"epochs": 1.5}},
    {"optim": {"base_lr": -1.0}},
    {"model": {"messenger_mode": "none"}},  # needs messengers = 0
    {"model": {"channels": [8, 8, 8]}},
    {"data": {"image_size": [32, 32]}},  # differs from the model resolution
    {"seed": -3},
    {"model": []},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config.from_dict(raw, env={})


def test_seed_env_override():
    assert config.from_dict({"seed": 4}, env={"TEVIT_SEED": "11"}).seed == 11
    assert config.from_dict({"seed": 4}, env={"TEVIT_SEED": ""}).seed == 4
    with pytest.raises(ConfigError):
        config.from_dict({}, env={"TEVIT_SEED": "abc"})


def test_round_trip_through_json(tmp_path):
    run = config.from_dict({"seed": 9, "model": {"messengers": 4, "interaction": "spatial"}}, env={})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(run.to_dict()))
    assert config.load(p, env={}) == run


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json", env={})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        config.load(bad, env={})


def test_model_build_shapes():
    cfg = config.from_dict({}, env={}).model_config()
    assert [s.channels for s in cfg.backbone.stages] == [32, 64, 128, 256]
    assert cfg.backbone.messengers == 8 and cfg.head.num_queries == 20
