import pytest
import yaml

from irisinvert.config import PRESETS, ExperimentConfig, from_dict, load_config, save_config
from irisinvert.nn import ConfigurationError


@pytest.mark.parametrize("preset", PRESETS)
@pytest.mark.parametrize("pipeline", ["gabor", "deep-segmented", "deep-normalized"])
def test_presets_load_for_every_pipeline(preset, pipeline):
    cfg = load_config(preset=preset, overrides={"pipeline": pipeline})
    assert cfg.pipeline == pipeline
    cfg.generator_config()


def test_image_shapes_and_template_dims():
    desk = load_config(preset="desk")
    assert desk.image_shape == (64, 64) and desk.template_dim() == 128
    g = load_config(preset="desk", overrides={"pipeline": "gabor"})
    assert g.image_shape == (32, 128) and g.template_dim() == 6 * 2 * 8 * 32
    paper = load_config(preset="paper")
    assert paper.image_shape == (256, 256) and paper.template_dim() == 2048
    assert load_config(preset="paper", overrides={"pipeline": "gabor"}).image_shape == (64, 512)


def test_round_trip(tmp_path):
    cfg = load_config(preset="desk")
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml", preset="paper")
    assert back == cfg
    assert from_dict(cfg.to_dict()) == cfg


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"core": {"epoch": 3}}))
    with pytest.raises(ConfigurationError, match="unknown key.*epoch"):
        load_config(tmp_path / "c.yaml")


@pytest.mark.parametrize("over", [
    {"pipeline": "fourier"},
    {"losses": {"perceptual_metric": "l3"}},
    {"eval": {"far_target": 1.5}},
    {"core": {"epochs": "many"}},
    {"generator": {"encoder_kernels": 4}},
    {"pipeline": "deep-segmented", "data": {"synthetic": {"image_mode": "normalized"}}},
    {"data": {"synthetic": {"shape": [48, 48]}}},
    {"gan": {"lr_generator": 1.0e-3}},
])
def test_invalid_configs(over):
    with pytest.raises(ConfigurationError):
        load_config(overrides=over)


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        load_config(preset="huge")


def test_with_seed_reaches_every_schedule():
    cfg = load_config().with_seed(11)
    assert (cfg.seed, cfg.extractor.schedule.seed, cfg.core.seed, cfg.gan.seed) == (11, 11, 11, 11)
    assert isinstance(cfg, ExperimentConfig)
