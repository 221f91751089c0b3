"""Versioned checkpoint files for the slot autoencoder and the diffusion model."""

from __future__ import annotations

from pathlib import Path

import torch

from . import FORMAT_VERSION
from .errors import CheckpointError, MissingFileError, VersionMismatchError
from .model import ModelConfig, TIVDiffusion
from .slots import SlotAutoencoder, SlotConfig, parameter_hash

SLOTS_FORMAT = "tivdiff/slots"
MODEL_FORMAT = "tivdiff/model"


def _save(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def _load(path, fmt):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: checkpoint not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types for corrupt files
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if payload.get("format") != fmt:
        raise CheckpointError(f"{path}: expected a {fmt} checkpoint, found {payload.get('format')!r}")
    if payload.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {payload.get('format_version')} != {FORMAT_VERSION}")
    return payload


def save_slots(path, model: SlotAutoencoder, config_hash=None, losses=(), frozen=True, run_config=None):
    _save(path, {
        "format": SLOTS_FORMAT,
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "run_config": run_config,
        "slot_config": model.cfg.to_dict(),
        "frozen": bool(frozen),
        "encoder_hash": parameter_hash(model.encoder),
        "loss_curve": [float(x) for x in losses],
        "state_dict": model.state_dict(),
    })


def load_slots(path):
    payload = _load(path, SLOTS_FORMAT)
    model = SlotAutoencoder(SlotConfig.from_dict(payload["slot_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    if payload["frozen"]:
        model.freeze_encoder()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta


def save_model(path, model: TIVDiffusion, config_hash=None, trained_steps=0, losses=(), run_config=None,
               slots_hash=None):
    _save(path, {
        "format": MODEL_FORMAT,
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "run_config": run_config,
        "model_config": model.cfg.to_dict(),
        "trained_steps": int(trained_steps),
        "slot_encoder_hash": slots_hash or parameter_hash(model.slot_encoder),
        "loss_curve": [float(x) for x in losses],
        "state_dict": model.state_dict(),
    })


def load_model(path):
    payload = _load(path, MODEL_FORMAT)
    model = TIVDiffusion(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.trained_steps = payload["trained_steps"]
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta
