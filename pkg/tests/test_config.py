from __future__ import annotations

import pytest
import yaml

from taprec.config import SCHEMA, ExperimentConfig, load_config, shipped_config, validate_config
from taprec.errors import ConfigError


def test_empty_file_is_all_defaults():
    cfg, errors = validate_config("")
    assert errors == [] and isinstance(cfg, ExperimentConfig)
    assert cfg["tap"]["lambda"] == 0.01 and cfg["tap"]["tau"] == 0.2 and cfg.seed == 0


def test_negative_lambda_names_field_and_range():
    cfg, errors = validate_config("tap:\n  lambda: -1\n")
    assert cfg is None
    assert errors == ["tap.lambda: must lie in [0, inf), got -1"]


def test_ratios_must_sum_to_one():
    _, errors = validate_config("dataset:\n  ratios: [0.5, 0.2, 0.2]\n")
    assert any(e.startswith("dataset.ratios: ratios must sum to 1") for e in errors)


def test_all_violations_are_reported():
    text = "tap:\n  lambda: -1\n  tau: 0\nbogus: 1\nbackbone:\n  n_blocks: 0\nevent:\n  strategies: [z9]\n"
    _, errors = validate_config(text)
    fields = sorted(e.split(":")[0] for e in errors)
    assert fields == ["backbone.n_blocks", "bogus", "event.strategies", "tap.lambda", "tap.tau"]
    assert any("unknown key" in e for e in errors)


def test_cross_field_checks():
    _, errors = validate_config("synth:\n  height: 32\n  width: 32\n")
    assert any(e.startswith("dataset.crop_size") for e in errors)
    assert any(e.startswith("tap.patch") for e in errors)
    _, errors = validate_config("synth:\n  division_rate: 0.7\n  death_rate: 0.5\n")
    assert errors and "death_rate" in errors[0] + errors[-1]


def test_malformed_yaml_is_reported():
    cfg, errors = validate_config("tap: [unclosed\n")
    assert cfg is None and len(errors) == 1


def test_round_trip_and_digest():
    cfg, _ = validate_config("seed: 4\n")
    again, errors = validate_config(cfg.to_yaml())
    assert errors == [] and again.data == cfg.data
    assert again.digest("tap") == cfg.digest("tap")
    other, _ = validate_config("seed: 4\ntap:\n  epochs: 3\n")
    assert other.digest("tap") != cfg.digest("tap") and other.digest("synth") == cfg.digest("synth")


def test_conversions():
    cfg, _ = validate_config("seed: 7\nsynth:\n  seed: 3\nbackbone:\n  n_blocks: 2\n")
    assert cfg.synth_config().seed == 3 and cfg.backbone_config().n_blocks == 2
    assert cfg.augmentation_config().seed == 7 and cfg.tap_loss_config().lam == 0.01


@pytest.mark.parametrize("name", ["minimal", "benchmark"])
def test_shipped_configs_are_valid(name):
    cfg = load_config(shipped_config(name))
    assert cfg.deterministic
    with pytest.raises(ConfigError):
        shipped_config("nope")


def test_load_config_raises(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"tap": {"tau": -2}}))
    with pytest.raises(ConfigError, match="tap.tau"):
        load_config(path)


def test_every_schema_section_documented():
    from pathlib import Path

    doc = (Path(__file__).parents[1] / "docs" / "config.md").read_text()
    for section in SCHEMA:
        assert f"`{section}`" in doc
