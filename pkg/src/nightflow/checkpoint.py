"""Versioned ``.npz`` archives of named parameter arrays plus JSON metadata."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def module_arrays(prefix, module: torch.nn.Module):
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays, prefix):
    state = {}
    for k, v in module.state_dict().items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {key}")
        if arrays[key].shape != tuple(v.shape):
            raise CheckpointError(f"{key}: shape {arrays[key].shape} != {tuple(v.shape)}")
        state[k] = torch.from_numpy(np.array(arrays[key]))
    module.load_state_dict(state)
    return module


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write ``arrays`` and ``meta`` (JSON-serialisable) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, **meta}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **{_META_KEY: blob}, **arrays)
    return path


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError as e:
        raise CheckpointError(f"{path}: no such checkpoint") from e
    except (ValueError, OSError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if _META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing metadata block")
    meta = json.loads(arrays.pop(_META_KEY).tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    return arrays, meta


def arrays_digest(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module):
    return arrays_digest(module_arrays("m", module))
