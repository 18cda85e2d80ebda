"""Run configuration: strict JSON loading, flag overrides and config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from .augment import AugmentParams
from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs_joint: int = 40
    epochs_post: int = 10
    batch_size: int = 32
    lr: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    # pair/guidance switches used by the ablation checks
    clip_contrast: bool = True
    semantic_guidance: bool = True
    use_prompts: bool = True
    deterministic: bool = True
    # "data": seed the negative queue with key embeddings of the training set; "random": unit noise
    queue_init: str = "data"
    train_data: str = ""
    out_dir: str = "runs/default"
    augment: AugmentParams = field(default_factory=AugmentParams)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.epochs_joint < 1:
            raise ConfigError("epochs_joint must be >= 1")
        if self.epochs_post < 0:
            raise ConfigError("epochs_post must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (mixing pairs samples within a batch)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.queue_init not in ("data", "random"):
            raise ConfigError(f"queue_init must be 'data' or 'random', got {self.queue_init!r}")
        try:
            self.augment.validate(self.model.num_joints)
            self.loss.validate()
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        cfg = _build(cls, data, "")
        cfg.validate()
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(hint, value, prefix + name)
    return cls(**kwargs)


def _coerce(hint, value, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{key}: expected a list of {len(args)} values")
        return tuple(_coerce(a, v, key) for a, v in zip(args, value))
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return [_coerce(args[0], v, key) for v in value] if args else value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    return value


def load_config(path: Union[str, Path]) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return TrainConfig.from_dict(data)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, Any]) -> TrainConfig:
    """Apply dotted-key overrides (``"loss.tau"``) on top of a config; None values are skipped."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        *path, leaf = key.split(".")
        for part in path:
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown key {key}")
        node[leaf] = value
    return TrainConfig.from_dict(data)


def config_hash(cfg: Union[TrainConfig, dict]) -> str:
    data = dict(cfg.to_dict() if isinstance(cfg, TrainConfig) else cfg)
    # where outputs land does not change the experiment
    data.pop("out_dir", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
