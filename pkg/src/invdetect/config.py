"""Layered run configuration: built-in defaults ← YAML/JSON file ← ``--set key=value``."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .detector import DetectorConfig
from .pipeline import AugmentConfig
from .corruption import DEFAULT_GRID


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    a = asdict(BackboneConfig(name="generator-A"))
    b = asdict(BackboneConfig(name="generator-B", ae_width=48, den_width=64, den_blocks=2))
    return {
        "seed": 0,
        "data": {"image_size": 32, "backbone_train": 1000, "detector_train": 400,
                 "detector_val": 100, "detector_test": 200},
        "backbone_a": a,
        "backbone_b": b,
        "fakes": {"train": 400, "val": 100, "test": 200, "test_b": 200},
        "ddim": {"K": 50},
        "pipeline": {"chunk_size": 50, "standardize_noise": False},
        "augment": AugmentConfig().to_dict(),
        "detector": asdict(DetectorConfig()),
        "eval": {"corruptions": [f"{k}:{v:g}" for k, v in DEFAULT_GRID], "figures": True},
        "math": {"dim": 4, "n_trials": 100},
    }


def _merge(base: dict, upd: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value in {text!r}: {e}") from e
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, doc)
    for o in overrides:
        cfg = _merge(cfg, parse_override(o))
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        backbone_config(cfg, "a"); backbone_config(cfg, "b")
        detector_config(cfg); augment_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    for sec in ("data", "fakes"):
        for k, v in cfg[sec].items():
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"{sec}.{k} must be a nonnegative integer")
    if not isinstance(cfg["ddim"]["K"], int) or cfg["ddim"]["K"] < 1:
        raise ConfigError("ddim.K must be a positive integer")


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def backbone_config(cfg: dict, which: str = "a") -> BackboneConfig:
    return _build(BackboneConfig, cfg[f"backbone_{which}"])


def detector_config(cfg: dict) -> DetectorConfig:
    return _build(DetectorConfig, cfg["detector"])


def augment_config(cfg: dict) -> AugmentConfig:
    return AugmentConfig.from_dict(cfg["augment"])


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
