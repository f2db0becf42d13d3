"""Checkpoint archive: parameters by name, optimiser state, step and config."""

from __future__ import annotations

import json
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def parameter_manifest(state_dict) -> list[dict]:
    return [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
            for k, v in state_dict.items()]


def save_checkpoint(path: str | Path, model, config, optimizer=None, scheduler=None, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config.to_json(),
        "manifest": parameter_manifest(state),
        "parameters": state,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "step": int(step),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:  # corrupt or foreign file
        raise CheckpointError(f"{path}: not a checkpoint archive ({e})") from e
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    payload["config_dict"] = json.loads(payload["config"])
    return payload


def restore_model(payload: dict, model) -> None:
    expected = {m["name"]: m["shape"] for m in parameter_manifest(model.state_dict())}
    stored = {m["name"]: m["shape"] for m in payload["manifest"]}
    if expected != stored:
        missing = sorted(set(expected) - set(stored))[:5]
        raise CheckpointError(f"checkpoint does not match the model (e.g. {missing or 'shape differences'})")
    model.load_state_dict(payload["parameters"])
