import pytest

from mlr.config import (BASE, PRESETS, config_hash, load_config, parse_overrides, parse_value, resolve,
                        serialize)
from mlr.errors import ConfigError, TypeMismatch, UnknownKey


def test_defaults_follow_continuous_table():
    cfg = load_config()
    assert cfg["sac.critic_m"] == 0.99 and cfg["sac.encoder_m"] == 0.95
    assert cfg["mask.cube"] == [8, 10, 10] and cfg["mask.ratio"] == 0.5 and cfg["mlr.K"] == 16
    sac = cfg.sac_config()
    assert sac.alpha_betas == (0.5, 0.999) and sac.init_temperature == 0.1


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_resolves(name):
    cfg = load_config(overrides={"preset": name})
    assert cfg["preset"] == name
    cfg.validate()


def test_discrete_preset_builds_rainbow_views():
    cfg = load_config(overrides={"preset": "discrete"})
    assert cfg.agent == "rainbow"
    r = cfg.rainbow_config()
    assert r.atoms == 51 and r.v_min == -10 and r.v_max == 10 and r.adam_eps == 1.5e-4
    assert cfg.encoder_config(4).variant.value == "discrete"


def test_task_overrides():
    assert load_config(overrides={"preset": "discrete", "env.task": "Pong"})["mlr.lambda"] == 5.0
    cfg = load_config(overrides={"env.task": "cartpole_swingup"})
    assert cfg["mask.cube"] == [4, 10, 10] and cfg["env.action_repeat"] == 8
    # explicit overrides win over the task table
    cfg = load_config(overrides={"env.task": "cartpole_swingup", "env.action_repeat": 2})
    assert cfg["env.action_repeat"] == 2


def test_unknown_key_and_type_mismatch():
    with pytest.raises(UnknownKey):
        load_config(overrides={"mlr.lamda": 1.0})
    with pytest.raises(TypeMismatch):
        load_config(overrides={"mlr.K": "sixteen"})
    with pytest.raises(TypeMismatch):
        load_config(overrides={"mask.cube": [8, 10.5, 10]})
    with pytest.raises(ConfigError):
        load_config(overrides={"preset": "nope"})
    with pytest.raises(ConfigError):
        load_config(overrides={"env.render_size": 40, "env.obs_size": 84})


def test_int_accepted_for_float_keys():
    assert load_config(overrides={"mlr.lambda": 2})["mlr.lambda"] == 2.0


def test_parse_values_and_overrides():
    assert parse_value("true") is True and parse_value("False") is False
    assert parse_value("[4, 8, 8]") == [4, 8, 8]
    assert parse_value("latent") == "latent"
    assert parse_value("1e-4") == 1e-4
    assert parse_overrides(["mask.ratio=0.3", "mlr.target = pixel"]) == {"mask.ratio": 0.3,
                                                                        "mlr.target": "pixel"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def test_file_round_trip(tmp_path):
    cfg = load_config(overrides={"preset": "smoke", "mask.ratio": 0.7, "mlr.target": "pixel"})
    path = tmp_path / "cfg.txt"
    path.write_text(serialize(cfg))
    back = load_config(path)
    assert back.values == cfg.values
    assert config_hash(back) == config_hash(cfg)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.txt")


def test_hash_ignores_output_dir_only():
    a = load_config(overrides={"run.out": "a"})
    assert config_hash(a) == config_hash(load_config(overrides={"run.out": "b"}))
    assert config_hash(a) != config_hash(load_config(overrides={"mask.ratio": 0.3}))


def test_with_overrides_keeps_earlier_settings():
    cfg = load_config(overrides={"preset": "smoke", "mask.ratio": 0.3})
    other = cfg.with_overrides({"mlr.K": 8})
    assert other["mask.ratio"] == 0.3 and other["mlr.K"] == 8 and other["preset"] == "smoke"


def test_typed_views():
    cfg = resolve({"preset": "desk"})
    aug = cfg.augment_spec()
    assert aug.out_size == (48, 48) and aug.crop_margin == 8
    assert cfg.env_spec().size == (56, 56)
    assert cfg.mask_spec().k == 8
    same = resolve({"env.render_size": 84, "env.obs_size": 84})
    assert same.augment_spec().crop_margin == BASE["augment.pad"]
