#!/usr/bin/env python3
"""
Training configuration and the INI-style config file

Precedence: command-line flags > config file > dataclass defaults.
"""

import configparser
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from errors import ConfigError
from synthdata import DatasetSpec

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

OUTPUT_ROOT_ENV = "PLDA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "./runs"

UDA_MODES = ("multihead", "global")
ASSIGN_MODES = ("mask", "simple")
TARGET_FEATURES = ("original", "masked")
DEVICES = ("cpu", "accelerator")


@dataclass
class TrainConfig:
    alpha: float = 0.6
    beta_prime: float = 0.6
    gamma: float = 0.9
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    grl_lambda: float = 1.0
    grl_warmup: bool = False
    refine_iterations: int = 10
    refine_dilations: Tuple[int, ...] = (1, 2, 4, 8)
    bg_power: float = 3.0
    feature_dim: int = 64
    use_uda: bool = True
    use_cps_s: bool = True
    use_cps_t: bool = True
    uda_mode: str = "multihead"
    assign_mode: str = "mask"
    simple_alpha_lo: float = 0.4
    target_features: str = "original"
    hflip: bool = True
    sweep_step: float = 0.05
    seed: int = 0
    device: str = "cpu"

    def validate(self):
        """Raise ConfigError naming the first invalid field"""
        for name in ("alpha", "beta_prime", "simple_alpha_lo", "sweep_step"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(name, f"must lie in (0, 1), got {value}")
        if self.assign_mode == "simple" and not self.simple_alpha_lo < self.alpha:
            raise ConfigError("simple_alpha_lo", f"must be below alpha ({self.alpha}), got {self.simple_alpha_lo}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr", f"must be > 0, got {self.base_lr}")
        if self.gamma <= 0:
            raise ConfigError("gamma", f"must be > 0, got {self.gamma}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda", f"must be >= 0, got {self.grl_lambda}")
        if self.refine_iterations < 0:
            raise ConfigError("refine_iterations", f"must be >= 0, got {self.refine_iterations}")
        if not self.refine_dilations or any(d < 1 for d in self.refine_dilations):
            raise ConfigError("refine_dilations", f"need positive dilations, got {self.refine_dilations}")
        if self.bg_power <= 0:
            raise ConfigError("bg_power", f"must be > 0, got {self.bg_power}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim", f"must be >= 1, got {self.feature_dim}")
        _check_choice("uda_mode", self.uda_mode, UDA_MODES)
        _check_choice("assign_mode", self.assign_mode, ASSIGN_MODES)
        _check_choice("target_features", self.target_features, TARGET_FEATURES)
        _check_choice("device", self.device, DEVICES)
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["refine_dilations"] = list(self.refine_dilations)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls(**_coerce_all(cls, data, section="train"))


def _check_choice(field: str, value: str, choices: Tuple[str, ...]):
    if value not in choices:
        raise ConfigError(field, f"must be one of {', '.join(choices)}, got '{value}'")


def _coerce(field: str, default: Any, raw: Any) -> Any:
    """Convert a raw value (file string, JSON value) to the type of the field's default"""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
            return tuple(int(item) for item in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError) as e:
        raise ConfigError(field, f"cannot parse '{raw}': {e}")


def _coerce_all(cls, data: Dict[str, Any], section: str) -> Dict[str, Any]:
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, raw in data.items():
        if key not in defaults:
            raise ConfigError(key, f"unknown key in [{section}]")
        out[key] = _coerce(key, defaults[key], raw)
    return out


def read_config_file(path: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Parse [train] and [data] sections into typed override dicts; unknown sections or keys are errors"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError("config", f"cannot read config file {path}")

    unknown = [s for s in parser.sections() if s not in ("train", "data")]
    if unknown:
        raise ConfigError(unknown[0], f"unknown section in {path}")

    train = _coerce_all(TrainConfig, dict(parser["train"]), "train") if parser.has_section("train") else {}
    data = _coerce_all(DatasetSpec, dict(parser["data"]), "data") if parser.has_section("data") else {}
    logger.debug(f"Config file {path}: {len(train)} train keys, {len(data)} data keys")
    return train, data


def write_config_file(path: str, cfg: TrainConfig, spec: Optional[DatasetSpec] = None):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["train"] = {k: ",".join(map(str, v)) if isinstance(v, list) else str(v)
                       for k, v in cfg.to_dict().items()}
    if spec is not None:
        parser["data"] = {k: str(v) for k, v in spec.to_dict().items()}
    with open(path, "w") as f:
        parser.write(f)


def resolve_config(config_path: Optional[str] = None, train_overrides: Optional[Dict[str, Any]] = None,
                   data_overrides: Optional[Dict[str, Any]] = None) -> Tuple[TrainConfig, DatasetSpec]:
    """Defaults, then the config file, then explicit overrides"""
    train_values: Dict[str, Any] = {}
    data_values: Dict[str, Any] = {}
    if config_path:
        file_train, file_data = read_config_file(config_path)
        train_values.update(file_train)
        data_values.update(file_data)
    train_values.update(_coerce_all(TrainConfig, train_overrides or {}, "train"))
    data_values.update(_coerce_all(DatasetSpec, data_overrides or {}, "data"))

    cfg = TrainConfig(**train_values).validate()
    spec = DatasetSpec(**data_values).validate()
    return cfg, spec


def output_root(explicit: Optional[str] = None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)
