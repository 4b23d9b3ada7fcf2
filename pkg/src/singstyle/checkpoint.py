"""Versioned checkpoint container."""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .model import SingingModel

FORMAT = "singstyle-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: SingingModel, stage: int, step: int, train_state: dict | None = None,
                    history: list | None = None, meta: dict | None = None) -> Path:
    cb = model.style.codebook
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "stage": int(stage),
        "step": int(step),
        "config": model.cfg.to_text(),
        "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "codebook": {"vectors": cb.embedding.detach().clone(), "usage": cb.usage.detach().clone()},
        "schedules": {
            "pitch_beta": torch.from_numpy(model.pitch_sched.beta[1:].copy()),
            "decoder_beta": torch.from_numpy(model.dec_sched.beta[1:].copy()),
        },
        "train_state": train_state or {},
        "history": history or [],
        "meta": dict(meta or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    return payload


def model_from_payload(payload: dict) -> SingingModel:
    cfg = Config.from_text(payload["config"])
    model = SingingModel(cfg)
    model.load_state_dict(payload["model"])
    for name, sched in (("pitch_beta", model.pitch_sched), ("decoder_beta", model.dec_sched)):
        stored = payload["schedules"][name].numpy()
        if not np.array_equal(stored, sched.beta[1:]):
            raise CheckpointError(f"stored {name} schedule disagrees with the config")
    model.eval()
    return model


def load_model(path, min_stage: int = 1) -> SingingModel:
    payload = read_checkpoint(path)
    if payload["stage"] < min_stage:
        raise CheckpointError(f"{path}: stage-{payload['stage']} checkpoint, need stage {min_stage}")
    return model_from_payload(payload)


def parameter_digest(modules) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer of ``modules``."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
