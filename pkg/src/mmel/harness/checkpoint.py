"""Versioned checkpoint container for :class:`LinkingModel` parameters."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from mmel.fusion import LinkingModel
from mmel.harness.config import RunConfig, config_from_dict

FORMAT = "mmel-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    step: int
    config: RunConfig
    metrics: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.model_hash()

    def build_model(self) -> LinkingModel:
        model = model_from_config(self.config)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in self.state.items()}
        if expected != got:
            diff = sorted(set(expected.items()) ^ set(got.items()))
            raise CheckpointError(f"parameter shapes do not match the configuration: {diff[:4]}")
        model.load_state_dict(self.state)
        model.eval()
        return model


def torch_dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def model_from_config(config: RunConfig) -> LinkingModel:
    return LinkingModel(
        d=config.d,
        heads=config.heads,
        dropout=config.dropout,
        gate_logit=config.gate_logit_init,
        init=config.init,
        seed=config.seed,
        dtype=torch_dtype(config.dtype),
        use_text=config.use_text,
        use_image=config.use_image,
        use_face=config.use_face,
        use_identity=config.use_identity,
    )


def snapshot(model: LinkingModel, step: int, config: RunConfig, metrics: Optional[dict] = None) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, step, config, dict(metrics or {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config_hash,
        "shapes": {k: list(v.shape) for k, v in ckpt.state.items()},
        "tensors": ckpt.state,
        "step": ckpt.step,
        "metrics": {str(k): v for k, v in ckpt.metrics.items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect: Optional[RunConfig] = None) -> Checkpoint:
    """Load and check a checkpoint; ``expect`` must agree on every shape-relevant key."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    config = config_from_dict(payload["config"])
    if config.model_hash() != payload["config_hash"]:
        raise CheckpointError("stored configuration does not match its hash")
    for name, shape in payload["shapes"].items():
        if list(payload["tensors"][name].shape) != shape:
            raise CheckpointError(f"tensor {name} has shape {list(payload['tensors'][name].shape)}, header says {shape}")
    if expect is not None and expect.model_hash() != payload["config_hash"]:
        raise CheckpointError(
            f"checkpoint config hash {payload['config_hash']} is incompatible with the run config "
            f"({expect.model_hash()})"
        )
    return Checkpoint(payload["tensors"], int(payload["step"]), config, payload.get("metrics", {}))
