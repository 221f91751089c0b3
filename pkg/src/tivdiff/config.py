"""Run configuration: one flat table of dotted keys, JSON files, flag overrides, hashing."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from pathlib import Path

from . import FORMAT_VERSION
from .model import ModelConfig
from .slots import SlotConfig
from .unet import DenoiserConfig

# Every default in one place.  Keys are "<section>.<field>"; sections slots/model/unet
# map one-to-one onto SlotConfig / ModelConfig / DenoiserConfig fields.
DEFAULTS = {
    "seed": 0,
    "data.variant": "single",
    "data.count": 1000,
    "data.split": 0.8,
    "data.workers": 1,
    "slots.num_slots": 3,
    "slots.slot_dim": 512,
    "slots.iters": 3,
    "slots.mlp_hidden": 1024,
    "slots.cnn_channels": 64,
    "slots.cnn_layers": 4,
    "slots.cnn_kernel": 5,
    "slots.feature_stride": 1,
    "slots.dec_channels": 64,
    "slots.dec_init": 8,
    "slots.init_seed": 0,
    "train_slots.steps": 2000,
    "train_slots.lr": 4e-4,
    "train_slots.batch_size": 16,
    "model.d": 512,
    "model.text_depth": 2,
    "model.heads": 4,
    "model.ff": 1024,
    "model.max_len": 32,
    "model.patch": 16,
    "model.unet_slot_dim": 256,
    "model.T": 1600,
    "model.schedule": "linear",
    "model.conditioning": "spade",
    "unet.base_width": 64,
    "unet.channel_mult": [1, 2, 4, 8],
    "unet.temporal_channels": 32,
    "unet.spade_hidden": 64,
    "unet.slot_key_dim": 64,
    "unet.groups": 8,
    "unet.hard_slots": True,
    "unet.tau": 1.0,
    "train.steps": 10000,
    "train.lr": 5e-5,
    "train.batch_size": 4,
    "train.warmup": 0,
    "sample.steps": 250,
    "sample.eta": 0.5,
    "log.every": 25,
}

# variants with a static distractor budget one extra slot
SLOTS_FOR_VARIANT = {"single": 3, "double": 3, "modified": 4}


class ConfigError(ValueError):
    pass


_positive = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_unit_open = (lambda v: 0 < v < 1, "must lie in (0, 1)")
_RANGES = {
    "data.count": _positive,
    "data.split": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "data.workers": _positive,
    "slots.num_slots": _positive,
    "train_slots.steps": _nonneg,
    "train_slots.lr": _positive,
    "train_slots.batch_size": _positive,
    "model.T": (lambda v: v >= 2, "must be >= 2"),
    "train.steps": _nonneg,
    "train.lr": _positive,
    "train.batch_size": _positive,
    "train.warmup": _nonneg,
    "sample.steps": _positive,
    "sample.eta": _unit_open,
    "log.every": _positive,
}


def _check_type(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    if key in _RANGES and not _RANGES[key][0](value):
        raise ConfigError(f"{key}: {value!r} {_RANGES[key][1]}")
    return value


class RunConfig:
    def __init__(self, values=None, explicit=()):
        self.values = dict(DEFAULTS)
        self.explicit = set(explicit)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"{key}: unknown configuration key")
        self.values[key] = _check_type(key, value)
        self.explicit.add(key)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def slot_config(self):
        return SlotConfig.from_dict(self.section("slots"))

    def model_config(self, slot_cfg=None):
        unet = DenoiserConfig.from_dict(self.section("unet"))
        return ModelConfig.from_dict({**self.section("model"), "unet": unet, "slots": slot_cfg or self.slot_config()})

    def to_json(self):
        return {"format_version": FORMAT_VERSION, **self.values}

    def hash(self):
        return config_hash(self.values)

    @classmethod
    def load(cls, path=None, overrides=None):
        values = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be an object of dotted keys")
            raw.pop("format_version", None)
            values.update(raw)
        cfg = cls(values)
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        if "seed" not in cfg.explicit and os.environ.get("TIV_SEED"):
            try:
                cfg.set("seed", int(os.environ["TIV_SEED"]))
            except ValueError as e:
                raise ConfigError(f"TIV_SEED: expected an integer, got {os.environ['TIV_SEED']!r}") from e
        return cfg


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(values):
    return hashlib.sha256(canonical_json(values).encode()).hexdigest()[:16]


class JsonLog:
    """One JSON object per line, to stderr and optionally a file."""

    def __init__(self, path=None, stream=sys.stderr, **fixed):
        self.path = Path(path) if path else None
        self.stream = stream
        self.fixed = fixed

    def __call__(self, record):
        line = canonical_json({**self.fixed, **record})
        if self.stream is not None:
            print(line, file=self.stream, flush=True)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(line + "\n")
