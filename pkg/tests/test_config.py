import pytest

from vadfusion.config import config_hash, load_config, train_config_from
from vadfusion.errors import ConfigError


def test_defaults_without_file():
    cfg = load_config(None, env={})
    assert cfg["train"]["learning_rate"] == 0.001
    assert cfg["train"]["weight_decay"] == 1e-4
    assert cfg["train"]["max_epochs"] == 50
    assert cfg["train"]["batch_size"] == 128
    assert cfg["fusion"]["arch"] == "mlp"
    assert cfg["captioning"]["mode"] == "fixed"


def test_file_values_override_defaults(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[train]\nseed = 9\nlearning_rate = 0.01\n\n[fusion]\narch = "transformer"\n')
    cfg = load_config(path, env={})
    assert cfg["train"]["seed"] == 9
    assert cfg["train"]["learning_rate"] == 0.01
    assert cfg["fusion"]["arch"] == "transformer"


def test_env_beats_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nseed = 9\n")
    cfg = load_config(path, env={"VADCTL_TRAIN_SEED": "40"})
    assert cfg["train"]["seed"] == 40


def test_cli_override_beats_env(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nseed = 9\n")
    cfg = load_config(path, overrides=["train.seed=77"], env={"VADCTL_TRAIN_SEED": "40"})
    assert cfg["train"]["seed"] == 77


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(path, env={})


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(path, env={})


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        load_config(None, overrides=["train.nope=1"], env={})


def test_bad_override_shape():
    with pytest.raises(ConfigError):
        load_config(None, overrides=["train.seed"], env={})


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/does/not/exist.toml", env={})


def test_bad_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train\nbroken")
    with pytest.raises(ConfigError):
        load_config(path, env={})


def test_type_coercion_from_env():
    cfg = load_config(None, env={"VADCTL_EVAL_ALLOW_PARTIAL": "true",
                                 "VADCTL_TRAIN_LEARNING_RATE": "0.01"})
    assert cfg["eval"]["allow_partial"] is True
    assert cfg["train"]["learning_rate"] == 0.01
    with pytest.raises(ConfigError):
        load_config(None, env={"VADCTL_TRAIN_SEED": "not-an-int"})


def test_hash_is_stable_and_sensitive():
    a = load_config(None, env={})
    b = load_config(None, env={})
    assert config_hash(a) == config_hash(b)
    c = load_config(None, overrides=["train.seed=5"], env={})
    assert config_hash(a) != config_hash(c)


def test_vlm_endpoint_key():
    cfg = load_config(None, overrides=["vlm.endpoint=http://localhost:9999/caption"], env={})
    assert cfg["vlm"]["endpoint"] == "http://localhost:9999/caption"


def test_train_config_mapping():
    cfg = load_config(None, overrides=[
        "train.seed=3", "fusion.arch=transformer", "captioning.mode=variable",
        "encoder.mode=finetuned",
    ], env={})
    tc = train_config_from(cfg)
    assert tc.seed == 3
    assert tc.fusion_arch == "transformer"
    assert tc.caption_mode == "variable"
    assert tc.encoder_mode == "finetuned"
