"""Bridge between torch modules and the checkpoint container, plus the
byte-level parameter hashing used to prove frozen stages never drift."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .fileio import load_checkpoint, save_checkpoint


def collect_params(modules: dict) -> dict:
    """Flatten {prefix: module} into {'prefix.param_name': float32 array}."""
    out = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def restore_params(modules: dict, params: dict) -> None:
    """Load a collect_params() dict back into {prefix: module}."""
    for prefix, module in modules.items():
        state = {}
        for name, tensor in module.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in params:
                raise ConfigError(f"checkpoint missing parameter {key}")
            state[name] = torch.from_numpy(params[key]).reshape(tensor.shape)
        module.load_state_dict(state)


def params_hash(modules: dict) -> str:
    """SHA-256 over all parameter bytes in sorted name order."""
    params = collect_params(modules)
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return digest.hexdigest()


def save_stage(path, stage: str, metadata: dict, modules: dict) -> None:
    save_checkpoint(path, stage, metadata, collect_params(modules))


def load_stage(path, stage: str, modules: dict) -> dict:
    """Restore modules from a stage checkpoint; returns its metadata."""
    metadata, params = load_checkpoint(path)
    if metadata.get("stage") != stage:
        raise ConfigError(
            f"{path} holds stage {metadata.get('stage')!r}, expected {stage!r}"
        )
    restore_params(modules, params)
    return metadata
