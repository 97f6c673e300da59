import json

import pytest
from pydantic import ValidationError

from app.config import BevMode, RunConfig, get_settings, load_run_config
from app.errors import ConfigurationError, MissingInputError


def test_defaults_describe_the_base_grid():
    config = RunConfig()
    assert config.grid_resolution == 0.4
    assert (config.image_h, config.image_w) == (864, 1536)
    assert config.partition == (1, 1, 0)
    assert config.hidden == 4 * config.channels
    assert config.bev_mode is BevMode.WEIGHTED_SUM


def test_small_preset_resolution():
    assert RunConfig(preset="small").grid_resolution == 0.8


def test_explicit_resolution_wins_over_preset():
    assert RunConfig(resolution=0.8, preset="base").grid_resolution == 0.8


def test_stride_must_divide_image():
    with pytest.raises(ValidationError, match="feature_stride"):
        RunConfig(feature_stride=7)


def test_heads_must_divide_channels():
    with pytest.raises(ValidationError, match="heads"):
        RunConfig(channels=6, heads=4)


def test_partition_must_divide_grid():
    with pytest.raises(ValidationError, match="does not divide z extent"):
        RunConfig(partition=(1, 1, 3))


def test_unknown_preset():
    with pytest.raises(ValidationError):
        RunConfig(preset="huge")


def test_environment_overrides_defaults(monkeypatch):
    monkeypatch.setenv("VOXELHEIGHT_SEED", "42")
    assert RunConfig().seed == 42


def test_file_then_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("VOXELHEIGHT_SEED", "42")
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 5, "channels": 16}), encoding="utf-8")
    config = load_run_config(path, {"seed": 9, "precision": None})
    assert config.seed == 9
    assert config.channels == 16
    assert config.precision == 64


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingInputError):
        load_run_config(tmp_path / "absent.json")


def test_malformed_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_run_config(path)


def test_summary_is_json_ready():
    summary = RunConfig(seed=3).summary()
    assert summary["seed"] == 3
    assert summary["resolution"] == 0.4
    assert summary["bev_mode"] == "weighted_sum"


def test_no_file_and_no_overrides_uses_cached_settings():
    get_settings.cache_clear()
    assert load_run_config(None, {"seed": None}) is get_settings()
    get_settings.cache_clear()
