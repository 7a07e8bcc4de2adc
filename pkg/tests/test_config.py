import json

import pytest

from motcast._validation import ConfigError
from motcast.config import RunConfig, toy_config


def test_toy_config_builds():
    cfg = RunConfig(toy_config())
    grid, layout, land = cfg.grid_and_layout()
    assert grid.shape == (16, 32) and layout.total_channels == 9 and land == 0.25
    assert cfg.section("finetune").stage == "finetune"
    assert cfg.section("train").peak_lr == 2e-3
    assert cfg.recipe(layout).seed == 0


def test_flags_override_sections():
    cfg = RunConfig(toy_config())
    assert cfg.section("train", iterations=7, seed=None).iterations == 7
    assert cfg.section("train", seed=None).seed == 0


@pytest.mark.parametrize("raw,msg", [
    ({"trainer": {}}, "unknown config sections"),
    ({"train": {"lr": 1}}, "unknown keys"),
    ({"train": []}, "must be an object"),
    ({"train": {"stage": "warmup"}}, "unknown stage"),
    ({"recipe": {"noise": 0.1}}, "missing required"),
])
def test_rejections(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig(raw)


def test_recipe_required_for_generation():
    cfg = RunConfig({})
    _, layout, _ = cfg.grid_and_layout()
    with pytest.raises(ConfigError, match="recipe"):
        cfg.recipe(layout)


def test_digest_is_order_independent(tmp_path):
    a = RunConfig({"train": {"iterations": 3, "seed": 1}})
    b = RunConfig({"train": {"seed": 1, "iterations": 3}})
    assert a.digest() == b.digest()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps(toy_config()))
    assert RunConfig.load(tmp_path / "ok.json").digest() == RunConfig(toy_config()).digest()


def test_bad_start():
    with pytest.raises(ConfigError):
        RunConfig({"data": {"start": "2006-01-01T05:00:00Z"}}).start()
