import dataclasses
import os

import pytest

import leakbench
from leakbench.config import ExperimentConfig, dump_config, load_config


def test_defaults_validate_and_roundtrip():
    cfg = ExperimentConfig().validate()
    back = load_config(text=dump_config(cfg))
    assert back.config_hash() == cfg.config_hash()
    assert back.to_dict() == cfg.to_dict()


def test_empty_text_gives_defaults():
    assert load_config(text="").config_hash() == ExperimentConfig().config_hash()


def test_override_changes_hash():
    base = ExperimentConfig().config_hash()
    assert load_config(text="[ssl]\nadv_steps = 2\n").config_hash() != base
    assert load_config(text="[experiment]\nw_site = 0.5\n").config_hash() != base


def test_unknown_key_and_bad_boolean():
    with pytest.raises(ValueError, match="unknown key"):
        load_config(text="[ssl]\nlearning_rate = 1\n")
    with pytest.raises(ValueError, match="boolean"):
        load_config(text="[probe]\nstandardize = maybe\n")


@pytest.mark.parametrize(
    "section, key, value",
    [
        ("ssl", "pool_per_site", -1),
        ("ssl", "adv_steps", 0),
        ("ssl", "adv_lr_mult", 0.0),
        ("ssl", "tau", 0.0),
        (None, "w_site", -0.1),
        (None, "grl_lambda", 0.0),
        (None, "checkpoints", "sometimes"),
        (None, "mode", "kfold"),
    ],
)
def test_validation_rejects(section, key, value):
    cfg = ExperimentConfig()
    if section:
        cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **{key: value})})
    else:
        cfg = dataclasses.replace(cfg, **{key: value})
    with pytest.raises(ValueError):
        cfg.validate()


def test_loso_needs_three_sites():
    cfg = ExperimentConfig()
    with pytest.raises(ValueError, match="at least 3 sites"):
        dataclasses.replace(cfg, sites=cfg.sites[:2]).validate()


def test_shipped_default_file_matches_builtin_defaults():
    path = os.path.join(os.path.dirname(leakbench.__file__), "default.cfg")
    assert load_config(path).config_hash() == ExperimentConfig().config_hash()
