"""Layered run configuration.

TOML file -> environment (``VADCTL_<SECTION>_<KEY>``) -> CLI overrides
(``--set section.key=value``), later layers winning. Unknown sections or
keys are rejected so typos fail loudly. The resolved snapshot is hashed
to name run directories and report files.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .errors import ConfigError

ENV_PREFIX = "VADCTL_"

DEFAULTS: dict[str, dict] = {
    "data": {
        "name": "dataset",
        "annotations": "",
        "frames_root": "",
        "segment_length": 10,
        "augment_copies": 0,  # offline augmented copies per training segment
        "augment_seed": 0,
    },
    "encoder": {
        "backend": "mock-hash",
        "mode": "pretrained",  # pretrained | finetuned
        "seed": 0,
        "cache_dir": "cache/embeddings",
        "finetune_steps": 30,
        "finetune_batch_size": 8,
        "finetune_learning_rate": 0.001,
    },
    "captioning": {
        "mode": "fixed",  # fixed | variable
    },
    "vlm": {
        "client": "mock",  # mock | http
        "endpoint": "",
        "model": "mock-vlm",
        "cache": "cache/captions.jsonl",
    },
    "fusion": {
        "arch": "mlp",  # mlp | transformer
        "threshold": 0.0,
    },
    "train": {
        "learning_rate": 0.001,
        "weight_decay": 1e-4,
        "max_epochs": 50,
        "batch_size": 128,
        "optimizer": "adam",
        "seed": 0,
        "early_stop_patience": 0,
        "val_fraction": 0.1,
    },
    "eval": {
        "allow_partial": False,
        "allow_same": False,
        "std": "population",  # population | sample
        "reports_dir": "reports",
        "test_name": "",
        "test_annotations": "",
        "test_frames_root": "",
    },
    "run": {
        "out_dir": "runs",
        "jobs": 1,
    },
}


def _coerce(current, raw: str, where: str):
    """Parse an env/CLI string to the type of the current (default) value."""
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def _check_known(section: str, key: str | None = None) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key is not None and key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                env: dict | None = None) -> dict:
    """Resolve the full configuration with standard precedence."""
    resolved = {section: dict(values) for section, values in DEFAULTS.items()}

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        for section, values in file_cfg.items():
            _check_known(section)
            if not isinstance(values, dict):
                raise ConfigError(f"top-level key {section!r} must be a section")
            for key, value in values.items():
                _check_known(section, key)
                default = DEFAULTS[section][key]
                if isinstance(default, bool) != isinstance(value, bool) and isinstance(default, bool):
                    raise ConfigError(f"{section}.{key}: expected a boolean")
                if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                    value = float(value)
                resolved[section][key] = value

    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if not key:
            raise ConfigError(f"environment variable {name} names no key")
        _check_known(section, key)
        resolved[section][key] = _coerce(DEFAULTS[section][key], raw, name)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, key = dotted.split(".", 1)
        _check_known(section, key)
        resolved[section][key] = _coerce(DEFAULTS[section][key], raw, dotted)

    return resolved


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def train_config_from(cfg: dict):
    """Map the resolved config onto the trainer's settings."""
    from .training import TrainConfig

    return TrainConfig(
        learning_rate=cfg["train"]["learning_rate"],
        weight_decay=cfg["train"]["weight_decay"],
        max_epochs=cfg["train"]["max_epochs"],
        batch_size=cfg["train"]["batch_size"],
        optimizer=cfg["train"]["optimizer"],
        seed=cfg["train"]["seed"],
        fusion_arch=cfg["fusion"]["arch"],
        caption_mode=cfg["captioning"]["mode"],
        encoder_mode=cfg["encoder"]["mode"],
        threshold=cfg["fusion"]["threshold"],
        early_stop_patience=cfg["train"]["early_stop_patience"],
        val_fraction=cfg["train"]["val_fraction"],
    )
