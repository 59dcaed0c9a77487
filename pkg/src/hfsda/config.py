"""Layered run configuration.

Resolution order (later wins): built-in defaults < config file < environment
(``HFSDA_<SECTION>__<KEY>``) < profile < ``--set key=value``.

Config files are INI; each section is the key prefix::

    [data]
    noisy_dir = corpus/noisy
    [train]
    epochs = 5

Relative paths in a file are taken relative to that file's directory.
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .dsp import StftConfig
from .errors import ConfigError, HfsdaError
from .metrics import check_command_template
from .model import ModelConfig, OdconvConfig
from .ssl_bridge import SslEncoderSpec
from .trainer import TrainConfig

PROFILES = ("smoke", "full")
PROFILE_OVERRIDES = {"smoke": {"train.epochs": 5}, "full": {}}
ENV_PREFIX = "HFSDA_"

_MODEL_RENAMES = {"loss_beta": "loss.beta", "waveform_loss_weight": "loss.waveform_weight"}
_EXTRA_KEYS = {
    "data.noisy_dir": "",
    "data.clean_dir": "",
    "data.test_noisy_dir": "",
    "data.test_clean_dir": "",
    "data.seed": 0,
    "data.workers": 1,
    "ssl.wav2vec_identifier": "",
    "metrics.pesq_cmd": "",
    "metrics.composite_cmd": "",
}
PATH_KEYS = {"data.noisy_dir", "data.clean_dir", "data.test_noisy_dir", "data.test_clean_dir",
             "train.checkpoint_dir", "ssl.identifier", "ssl.wav2vec_identifier"}


def _schema() -> dict:
    keys = {}
    for prefix, cls in (("stft", StftConfig), ("odconv", OdconvConfig),
                        ("ssl", SslEncoderSpec), ("train", TrainConfig)):
        for f in fields(cls):
            keys[f"{prefix}.{f.name}"] = getattr(cls(), f.name)
    base = ModelConfig()
    for f in fields(ModelConfig):
        if f.name in ("stft", "odconv", "ssl"):
            continue
        keys[_MODEL_RENAMES.get(f.name, f"model.{f.name}")] = getattr(base, f.name)
    keys.update(_EXTRA_KEYS)
    return keys


SCHEMA = _schema()


def _parse(key: str, raw):
    default = SCHEMA[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def _check_keys(values: dict, origin: str) -> None:
    for key in values:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} (from {origin})")


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if parser.defaults():
        raise ConfigError(f"{path}: keys outside a section: {sorted(parser.defaults())}")
    values = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            full = f"{section}.{key}"
            _check_keys({full: None}, str(path))
            if full in PATH_KEYS and val and not os.path.isabs(val):
                val = str((path.parent / val).resolve())
            values[full] = val
    return values


def read_env(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for name, val in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
        full = f"{section}.{key}"
        _check_keys({full: None}, f"environment variable {name}")
        values[full] = val
    return values


def parse_overrides(items) -> dict:
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        _check_keys({key: None}, "--set")
        values[key] = val
    return values


@dataclass
class RunConfig:
    values: dict
    model: ModelConfig
    train: TrainConfig
    profile: str
    explicit: frozenset         # keys set by file/env/--set rather than defaults/profile

    def get(self, key: str):
        return self.values[key]

    @property
    def pesq_cmd(self) -> Optional[str]:
        return self.values["metrics.pesq_cmd"] or None

    @property
    def composite_cmd(self) -> Optional[str]:
        return self.values["metrics.composite_cmd"] or None

    def model_overrides(self) -> dict:
        """Explicitly set keys that affect the model architecture."""
        prefixes = ("stft.", "odconv.", "ssl.", "model.", "loss.")
        return {k: self.values[k] for k in self.explicit
                if k.startswith(prefixes) and k != "ssl.wav2vec_identifier"}

    def write_resolved(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"profile": self.profile, **self.values},
                                   indent=1, sort_keys=True) + "\n")
        return path


def model_config_from(values: dict, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Build a ModelConfig from flat keys, starting from ``base`` (defaults if None)."""
    base_dict = (base or ModelConfig()).to_dict()
    for key, val in values.items():
        section, name = key.split(".", 1)
        if section in ("stft", "odconv", "ssl"):
            if name in base_dict[section]:
                base_dict[section][name] = val
        elif section == "model":
            base_dict[name] = val
        elif key == "loss.beta":
            base_dict["loss_beta"] = val
        elif key == "loss.waveform_weight":
            base_dict["waveform_loss_weight"] = val
    try:
        return ModelConfig.from_dict(base_dict)
    except HfsdaError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(values: dict) -> TrainConfig:
    kw = {f.name: values[f"train.{f.name}"] for f in fields(TrainConfig)}
    try:
        return TrainConfig(**kw)
    except HfsdaError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve(config_path=None, overrides=(), profile: str = "full", seed: Optional[int] = None,
            environ=None) -> RunConfig:
    """Merge every layer, parse types and validate; raises ConfigError."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    file_vals = read_config_file(config_path) if config_path else {}
    env_vals = read_env(environ)
    set_vals = parse_overrides(overrides)
    if seed is not None:
        set_vals.update({"train.seed": str(seed), "data.seed": str(seed)})

    values = dict(SCHEMA)
    for layer in (file_vals, env_vals, PROFILE_OVERRIDES[profile], set_vals):
        for key, raw in layer.items():
            values[key] = _parse(key, raw)
    for key in ("metrics.pesq_cmd", "metrics.composite_cmd"):
        if values[key]:
            check_command_template(values[key], key)
    explicit = frozenset(file_vals) | frozenset(env_vals) | frozenset(set_vals)
    return RunConfig(values, model_config_from(values), _train_config(values), profile, explicit)
