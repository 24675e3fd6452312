"""Declarative run configuration (JSON) shared by every CLI subcommand.

Top-level keys::

    seed        int; every random stream (init, shuffle, synth) is derived from it
    output_dir  directory for all run outputs
    jobs        parallel worker processes for independent runs
    data        {"path", "test_path", "synthetic": {SynthConfig fields except seed}}
    model       ModelConfig fields except seed; geometry defaults to the data's
    train       TrainPlan fields except seed
    eval        {"mode": "cv"|"ho", "k", "train_fraction", "val_fraction"}
    interpret   {"enabled", "reference_class", "target_class"}
    sweep       {"m": [...], "w_seconds": [...], "temporal_kind": [...], "train_fraction": [...]}

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import zlib
from pathlib import Path

import numpy as np

from .data import IncompatibleShapes, SynthConfig
from .model import ModelConfig
from .trainer import TrainPlan


class ConfigNotFound(FileNotFoundError):
    pass


class SchemaError(ValueError):
    pass


GEOMETRY_KEYS = ("n_channels", "n_samples", "sample_rate_hz", "n_classes")


def _fields(cls, exclude=("seed",)) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
        else:
            out[f.name] = None
    return out


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def default_config() -> dict:
    model = _fields(ModelConfig)
    model["bands"] = [list(b) for b in model["bands"]]
    return {
        "seed": 0,
        "output_dir": "fbcnet_run",
        "jobs": 1,
        "data": {"path": None, "test_path": None,
                 "synthetic": {k: _jsonable(v) for k, v in _fields(SynthConfig).items()}},
        "model": model,
        "train": _fields(TrainPlan),
        "eval": {"mode": "cv", "k": 10, "train_fraction": 1.0, "val_fraction": 0.2},
        "interpret": {"enabled": False, "reference_class": 1, "target_class": 0},
        "sweep": {"m": [], "w_seconds": [], "temporal_kind": [], "train_fraction": []},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise SchemaError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise SchemaError(f"config key {where!r} must be an object")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v
    return base


def resolve(raw: dict | None) -> dict:
    cfg = _merge(copy.deepcopy(default_config()), raw or {})
    if cfg["eval"]["mode"] not in ("cv", "ho"):
        raise SchemaError(f"eval.mode must be 'cv' or 'ho', got {cfg['eval']['mode']!r}")
    if not isinstance(cfg["seed"], int):
        raise SchemaError("seed must be an integer")
    for k, v in cfg["sweep"].items():
        if not isinstance(v, list):
            raise SchemaError(f"sweep.{k} must be a list")
    try:
        TrainPlan(**cfg["train"]).validate()
        SynthConfig(**_tupled_synth(cfg["data"]["synthetic"]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFound(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must be an object")
    return resolve(raw)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def derive_seed(seed: int, stream: str) -> int:
    """Independent, stable sub-seed for a named random stream."""
    ss = np.random.SeedSequence([seed, zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _tupled_synth(d: dict) -> dict:
    d = dict(d)
    d["target_groups"] = tuple(tuple(g) for g in d["target_groups"])
    d["band_hz"] = tuple(d["band_hz"])
    return d


def synth_config(cfg: dict, stream: str = "synth") -> SynthConfig:
    return SynthConfig(**_tupled_synth(cfg["data"]["synthetic"]), seed=derive_seed(cfg["seed"], stream))


def model_config(cfg: dict, dataset) -> ModelConfig:
    model = dict(cfg["model"])
    geometry = {"n_channels": dataset.n_channels, "n_samples": dataset.n_samples,
                "sample_rate_hz": dataset.sample_rate_hz, "n_classes": dataset.n_classes}
    for k in GEOMETRY_KEYS:
        if model.get(k) is None:
            model[k] = geometry[k]
        elif model[k] != geometry[k]:
            raise IncompatibleShapes(f"model.{k}={model[k]} but dataset has {geometry[k]}")
    try:
        return ModelConfig(**model, seed=derive_seed(cfg["seed"], "init"))
    except TypeError as exc:
        raise SchemaError(str(exc)) from None


def train_plan(cfg: dict) -> TrainPlan:
    return TrainPlan(**cfg["train"], seed=derive_seed(cfg["seed"], "shuffle"))
