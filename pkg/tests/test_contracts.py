"""
Tests for experiment configuration contracts.
"""
import copy
import json

import pytest

from gdnet.errors import ConfigValidationError
from gdnet.schemas import (
    PRESETS,
    ExperimentConfig,
    GammaMode,
    config_hash,
    get_preset,
    load_config,
    validate_config,
)


def _raw(name="en100"):
    return copy.deepcopy(PRESETS[name])


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    cfg = get_preset(name)
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.name == name


def test_unknown_preset():
    with pytest.raises(ConfigValidationError) as info:
        get_preset("nope")
    assert "en100" in info.value.details["available"]


def test_unknown_field_is_named():
    raw = _raw()
    raw["sampler"]["step_size"] = 0.1
    with pytest.raises(ConfigValidationError) as info:
        validate_config(raw)
    assert "sampler.step_size" in str(info.value)
    assert info.value.details["field"] == "sampler.step_size"


def test_layer_stack_must_end_at_latent_dim():
    raw = _raw()
    raw["data"]["d_x"] = 50
    with pytest.raises(ConfigValidationError) as info:
        validate_config(raw)
    assert "model.layers" in str(info.value)


def test_unknown_layer_kind():
    raw = _raw()
    raw["model"]["layers"][1] = {"kind": "tanh"}
    with pytest.raises(ConfigValidationError):
        validate_config(raw)


def test_blur_needs_image_dims():
    raw = _raw("deblur16")
    raw["data"]["image_width"] = 8
    with pytest.raises(ConfigValidationError):
        validate_config(raw)


def test_explicit_gamma_mode_needs_gamma():
    raw = _raw()
    raw["model"]["gamma_mode"] = "explicit"
    with pytest.raises(ConfigValidationError):
        validate_config(raw)
    raw["model"]["gamma"] = 0.001
    cfg = validate_config(raw)
    assert cfg.model.gamma_mode == GammaMode.EXPLICIT


def test_batch_size_bounded_by_training_set():
    raw = _raw()
    raw["sampler"]["batch_size"] = 500
    with pytest.raises(ConfigValidationError):
        validate_config(raw)


def test_degenerate_elastic_net_rejected():
    raw = _raw()
    raw["data"]["lambda1"] = 0.0
    raw["data"]["lambda2"] = 0.0
    with pytest.raises(ConfigValidationError):
        validate_config(raw)


def test_rho0_defaults_to_training_size():
    assert get_preset("en100").rho0() == 200.0
    assert get_preset("prior-calibration").rho0() == 64.0


# ============= Loading =============

def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(_raw()), encoding="utf-8")
    assert config_hash(load_config(path)) == config_hash(get_preset("en100"))


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigValidationError):
        load_config(path)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigValidationError):
        load_config(tmp_path / "missing.json")


# ============= Hashing =============

def test_hash_scopes():
    cfg = get_preset("en100")
    other_eval = cfg.model_copy(update={"eval": cfg.eval.model_copy(update={"last_k": 10})})
    assert config_hash(other_eval, "run") == config_hash(cfg, "run")
    assert config_hash(other_eval, "full") != config_hash(cfg, "full")

    deeper = cfg.with_depth(20)
    assert config_hash(deeper, "data") == config_hash(cfg, "data")
    assert config_hash(deeper, "run") != config_hash(cfg, "run")

    reseeded = cfg.with_seed(1)
    assert config_hash(reseeded, "data") != config_hash(cfg, "data")
    assert cfg.with_seed(None) is cfg


@pytest.mark.parametrize("seed", [-1, 2 ** 64])
def test_with_seed_rejects_out_of_range_seed(seed):
    with pytest.raises(ConfigValidationError) as info:
        get_preset("en100").with_seed(seed)
    assert info.value.details["field"] == "seed"


@pytest.mark.parametrize("depth", [0, -3])
def test_with_depth_rejects_nonpositive_depth(depth):
    with pytest.raises(ConfigValidationError) as info:
        get_preset("en100").with_depth(depth)
    assert info.value.details["field"] == "model.depth_unroll"


def test_overrides_keep_the_rest_of_the_config():
    cfg = get_preset("en100")
    assert cfg.with_seed(cfg.seed) == cfg
    assert cfg.with_depth(20).model.depth_unroll == 20
    assert cfg.with_depth(20).data == cfg.data


def test_hash_is_key_order_independent():
    raw = _raw()
    shuffled = dict(reversed(list(raw.items())))
    assert config_hash(validate_config(raw)) == config_hash(validate_config(shuffled))
