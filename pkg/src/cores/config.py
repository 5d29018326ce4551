"""TOML experiment configuration: parsing, validation and canonical serialization."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .gnn import GnnConfig
from .ppo import PpoConfig
from .reward import RewardConfig
from .trainer import TrainConfig

METHODS = ("cores", "vanilla")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class DataConfig:
    dataset: str = "MUTAG"
    data_dir: str = ""  # empty: fall back to CORES_DATA_DIR, then ./data
    folds: int = 1
    split_seed: int = 0
    num_graphs: int = 200  # synthetic datasets only
    base_nodes: int = 15
    synthetic_seed: int = 0

    def __post_init__(self):
        if self.folds < 1:
            raise ValueError("folds must be at least 1")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    method: str = "cores"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


# Hyperparameter names from the published best-configuration tables -> config keys.
APPENDIX_KEYS = {
    "Split sizes": "train.splits",
    "Batch size": "train.batch_size",
    "Early stopping clf. patience": "train.early_stop_patience",
    "Dropout rate": "gnn.dropout",
    "Batch normalizing": "gnn.batch_norm",
    "Dimension of hidden layers": "gnn.hidden_dim",
    "Number of GNN layers": "gnn.num_layers",
    "Global pooling type": "gnn.pooling",
    "Classifier scheduler factor": "train.classifier_scheduler_factor",
    "Classifier learning rate": "train.classifier_lr",
    "epsilon": "gnn.gin_epsilon",
    "Trainable epsilon": "gnn.gin_epsilon_trainable",
    "Number of heads": "gnn.num_heads",
    "Early stopping PPO patience": "train.ppo_patience",
    "Number of environment steps": "ppo.env_steps",
    "Number of PPO epochs": "ppo.ppo_epochs",
    "Environment penalty size": "reward.env_penalty",
    "RL scheduler factor": "train.rl_scheduler_factor",
    "Ratio of the critic learning rate": "ppo.critic_lr_ratio",
    "PPO entropy coefficient": "ppo.entropy_coef",
    "PPO MSE coefficient": "ppo.value_coef",
    "PPO clip value epsilon": "ppo.clip_epsilon",
    "Conformal error rate alpha": "reward.alpha_conf",
    "d": "reward.desired_ratio",
    "lambda": "reward.lambda",
}

# config-file key -> dataclass attribute where they differ
_RENAMES = {("reward", "lambda"): "lam"}
_SECTIONS = ("gnn", "ppo", "reward", "train", "data")
_NESTED = {"gnn", "ppo", "reward"}


def _section_fields(cls) -> dict[str, object]:
    """Config key -> default value for the scalar fields of a dataclass."""
    out = {}
    inst = cls()
    for f in fields(cls):
        if f.name in _NESTED:
            continue
        out[f.name] = getattr(inst, f.name)
    return out


_SCHEMA = {
    "gnn": GnnConfig,
    "ppo": PpoConfig,
    "reward": RewardConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _key_name(section: str, attr: str) -> str:
    for (s, key), a in _RENAMES.items():
        if s == section and a == attr:
            return key
    return attr


def _attr_name(section: str, key: str) -> str:
    return _RENAMES.get((section, key), key)


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean", where)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer", where)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number", where)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string", where)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list", where)
        kind = type(default[0]) if default else None
        return tuple(float(v) if kind is float else v for v in value)
    raise ConfigError(f"{where}: unsupported type", where)


def from_dict(doc: dict) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(_SECTIONS) - {"method"})
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r}", unknown[0])
    method = doc.get("method", "cores")
    if not isinstance(method, str):
        raise ConfigError("method must be a string", "method")
    kwargs: dict[str, dict] = {}
    for section in _SECTIONS:
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table", section)
        defaults = _section_fields(_SCHEMA[section])
        values = {}
        for key, value in body.items():
            attr = _attr_name(section, key)
            if attr not in defaults or key != _key_name(section, attr):
                raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
            values[attr] = _coerce(section, key, value, defaults[attr])
        kwargs[section] = values
    try:
        train = TrainConfig(
            gnn=GnnConfig(**kwargs["gnn"]),
            ppo=PpoConfig(**kwargs["ppo"]),
            reward=RewardConfig(**kwargs["reward"]),
            **kwargs["train"],
        )
        return ExperimentConfig(train=train, data=DataConfig(**kwargs["data"]), method=method)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_dict(doc)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigError(f"cannot serialize non-finite value {value}")
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def to_dict(cfg: ExperimentConfig) -> dict:
    objs = {"gnn": cfg.train.gnn, "ppo": cfg.train.ppo, "reward": cfg.train.reward, "train": cfg.train, "data": cfg.data}
    doc: dict = {"method": cfg.method}
    for section in _SECTIONS:
        obj = objs[section]
        doc[section] = {
            _key_name(section, attr): getattr(obj, attr) for attr in _section_fields(_SCHEMA[section])
        }
    return doc


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical TOML text: every key present, in dataclass field order."""
    doc = to_dict(cfg)
    lines = [f"method = {_fmt(doc['method'])}"]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in doc[section].items():
            lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"
