"""
Flat key-value experiment configuration.

Config files are YAML mappings with scalar or list values only (no nesting)
and a mandatory ``version: 1`` key. Fractions such as ``"8/255"`` are
accepted wherever a real number is expected. Relative paths are resolved
against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import yaml

CONFIG_VERSION = 1
PATH_KEYS = ("detector_data", "attacker_data", "test_data", "backbone_registry", "text_encoder_dir",
             "fphead", "detector", "adversarial_dir")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    version: int = CONFIG_VERSION
    # models
    backbone: str = "toy"
    backbones: list = field(default_factory=list)
    backbone_registry: str | None = None
    text_encoder: str = "toy"
    text_encoder_dir: str | None = None
    text_dim: int = 32
    # data
    detector_data: str | None = None
    attacker_data: str | None = None
    test_data: str | None = None
    train_per_class: int | None = None
    val_per_class: int = 0
    few_shot: int = 0
    augment_detector: bool = True
    augment_attacker: bool = True
    # surrogate head
    epochs: int = 20
    margin: float = 1.0
    learning_rate: float = 5e-3
    batch_size: int = 64
    embed_dim: int = 1024
    # detector
    detector_epochs: int = 20
    detector_learning_rate: float = 5e-3
    head_depth: int = 2
    hidden_dim: int = 256
    # attack
    attack: str = "siaa"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 14
    random_start: bool = True
    normalize_embeddings: bool = True
    raw_sidecar: bool = False
    # artifacts
    fphead: str | None = None
    detector: str | None = None
    adversarial_dir: str | None = None
    # ablation grid
    ablate_depths: list = field(default_factory=lambda: [1, 2, 3])
    ablate_few_shot: list = field(default_factory=lambda: [0])
    ablate_aug_off: list = field(default_factory=lambda: [False])
    ablate_swap: list = field(default_factory=lambda: [False])

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_REAL_KEYS = {"margin", "learning_rate", "detector_learning_rate", "epsilon", "alpha"}


def _coerce(key, value, kind):
    if key in _REAL_KEYS:
        try:
            return float(Fraction(str(value))) if isinstance(value, str) else float(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
    if kind in ("int", "int | None") and value is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if kind == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if kind == "list" and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    if isinstance(value, (dict,)):
        raise ConfigError(f"{key}: nested values are not allowed")
    return value


def parse_config(raw: dict, base_dir=None, seed: int | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    if seed is not None:
        raw["seed"] = seed
    if "seed" not in raw:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, known[k]) for k, v in raw.items()}
    if base_dir is not None:
        for key in PATH_KEYS:
            if values.get(key) is not None and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    return ExperimentConfig(**values)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return parse_config(raw, base_dir=path.parent, seed=seed)


def dump_config(path, config: ExperimentConfig):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
