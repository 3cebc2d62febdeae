"""Run configuration loaded from JSON, with dataset presets."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

# sequence length, train fraction and temperature per corpus
DATASET_PRESETS = {
    "harth": {"seq_len": 119, "train_fraction": 0.5, "temperature": 0.05},
    "sleepeeg": {"seq_len": 300, "train_fraction": 0.8, "temperature": 0.1},
    "ecg": {"seq_len": 500, "train_fraction": 0.8, "temperature": 0.5},
}

DEFAULTS: dict = {
    "dataset": {
        "name": "synth",
        "source": "synth",
        "synth": {
            "num_seqs": 40,
            "T": 120,
            "D": 16,
            "num_classes": 3,
            "regime_dwell": 20.0,
            "noise_sigma": 0.3,
            "seed": 0,
        },
        "csv": {"paths": [], "channels": None, "label_column": "label", "sample_rate": 1.0},
    },
    "stft": {"window": 50, "hop": 25, "window_fn": "hann", "log_scale": False},
    "seq_len": None,
    "split": {"train_fraction": None, "seed": 0},
    "encoder": {"hidden_dims": [64, 64], "output_dim": 320, "bn_momentum": 0.1, "bn_epsilon": 1e-5},
    "train": {
        "batch_size": 8,
        "learning_rate": 0.001,
        "iterations": None,
        "loss_kind": "emargin",
        "loss": {
            "temperature": None,
            "threshold": 0.4,
            "margin": 5.0,
            "pseudo_label_scope": "pairwise",
            "cosine_epsilon": 1e-12,
        },
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "weight_decay": 0.01,
        "grad_clip": None,
        "sample_threshold": 160_000,
    },
    "eval": {
        "subset_counts": None,
        "per_class": 200,
        "k": None,
        "assignment": "kmeans",
        "probe": {"lr": 0.01, "epochs": 500, "weight_decay": 0.01},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def resolve(overrides: dict | None = None) -> dict:
    """Merge ``overrides`` onto the defaults and fill dataset-dependent values."""
    cfg = _merge(DEFAULTS, overrides or {})
    preset = DATASET_PRESETS.get(str(cfg["dataset"]["name"]).lower(), {})
    if cfg["seq_len"] is None:
        cfg["seq_len"] = preset.get("seq_len", cfg["dataset"]["synth"]["T"])
    if cfg["split"]["train_fraction"] is None:
        cfg["split"]["train_fraction"] = preset.get("train_fraction", 0.8)
    if cfg["train"]["loss"]["temperature"] is None:
        cfg["train"]["loss"]["temperature"] = preset.get("temperature", 0.1)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["source"] not in ("synth", "csv"):
        raise ConfigError(f"dataset.source must be 'synth' or 'csv', got {ds['source']!r}")
    syn = ds["synth"]
    if int(syn["num_classes"]) < 2:
        raise ConfigError("dataset.synth.num_classes must be >= 2")
    if not float(syn["regime_dwell"]) >= 2:
        raise ConfigError("dataset.synth.regime_dwell must be >= 2")
    if int(syn["T"]) < 3 or int(syn["num_seqs"]) < 2 or int(syn["D"]) < 1:
        raise ConfigError("dataset.synth needs T >= 3, num_seqs >= 2 and D >= 1")
    if float(syn["noise_sigma"]) < 0:
        raise ConfigError("dataset.synth.noise_sigma must be non-negative")
    if not 0 < float(cfg["split"]["train_fraction"]) < 1:
        raise ConfigError("split.train_fraction must lie in (0, 1)")
    if cfg["eval"]["assignment"] not in ("kmeans", "labels"):
        raise ConfigError("eval.assignment must be 'kmeans' or 'labels'")
    st = cfg["stft"]
    if not 0 < int(st["hop"]) <= int(st["window"]):
        raise ConfigError("stft needs 0 < hop <= window")


def load(path: str | Path | None) -> dict:
    if path is None:
        return resolve()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return resolve(raw)


def digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
