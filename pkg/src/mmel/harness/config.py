"""Run configuration: a flat ``key: value`` YAML file with the keys below."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from mmel.objectives import LossConfig

# keys that change parameter shapes or the forward graph
MODEL_KEYS = ("d", "heads", "use_text", "use_image", "use_face", "use_identity", "dtype")
PATH_KEYS = ("train_samples", "dev_samples", "test_samples", "entities", "features", "attributes", "out_dir")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d: int = 512
    heads: int = 8
    dropout: float = 0.4
    gate_logit_init: float = -2.0
    init: str = "identity"
    dtype: str = "float32"
    use_text: bool = True
    use_image: bool = True
    use_face: bool = True
    use_identity: bool = True
    # optimization
    lr: float = 5e-5
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    eval_every: int = 2000
    max_steps: int = 0
    patience: int = 0
    # objectives
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 10.0
    margin: float = 0.5
    n_hard: int = 4
    n_inbatch: int = 1
    # retrieval and evaluation
    lam: int = 100
    typed_retrieval: bool = False
    eval_workers: int = 1
    eval_chunk: int = 64
    dataset: str = "dataset"
    # encoders
    encoder_seed: int = 42
    seed: int = 0
    # paths
    train_samples: Optional[str] = None
    dev_samples: Optional[str] = None
    test_samples: Optional[str] = None
    entities: Optional[str] = None
    features: Optional[str] = None
    attributes: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        positive = ("d", "heads", "batch_size", "epochs", "eval_every", "lam", "eval_workers", "eval_chunk")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.max_steps < 0 or self.patience < 0:
            raise ConfigError("max_steps and patience must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for the contrastive losses")
        self.loss  # validates the loss fields

    @property
    def loss(self) -> LossConfig:
        try:
            return LossConfig(self.tau, self.alpha, self.beta, self.margin, self.n_hard, self.n_inbatch)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def model_hash(self) -> str:
        payload = json.dumps({k: getattr(self, k) for k in MODEL_KEYS}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def full_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "eval_workers")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def config_from_dict(data: dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"config must be flat; {key!r} is nested")
        default = known[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key} must be true/false")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if key in PATH_KEYS and value is not None and base_dir is not None:
            value = str((base_dir / value).resolve()) if not Path(value).is_absolute() else value
        values[key] = value
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a key: value mapping")
    return config_from_dict(data, base_dir=path.parent)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
