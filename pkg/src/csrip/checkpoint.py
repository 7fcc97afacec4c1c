"""Versioned checkpoint container shared by SR networks and recognition models."""
import hashlib
import json
from pathlib import Path

import torch

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def state_hash(state_dict):
    h = hashlib.sha256()
    for key in sorted(state_dict):
        t = state_dict[key]
        h.update(key.encode())
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().contiguous()
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


def parameter_hash(module):
    return state_hash(module.state_dict())


def save_checkpoint(path, kind, model_state, config, meta=None, **extra):
    """Write ``{version, kind, config, config_hash, content_hash, model, meta, ...}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model_state = {k: v.detach().cpu().clone() for k, v in model_state.items()}
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "content_hash": state_hash(model_state),
        "model": model_state,
        "meta": meta or {},
    }
    payload.update(extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return payload


def load_checkpoint(path, kind=None, expected_config_hash=None, **expect_meta):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    if config_hash(payload["config"]) != payload["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected_config_hash is not None and payload["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {payload['config_hash']} != expected {expected_config_hash}")
    if state_hash(payload["model"]) != payload["content_hash"]:
        raise CheckpointError(f"{path}: parameter content hash mismatch (corrupt file?)")
    for key, want in expect_meta.items():
        got = payload["meta"].get(key)
        if got != want:
            raise CheckpointError(f"{path}: {key}={got!r}, expected {want!r}")
    return payload
