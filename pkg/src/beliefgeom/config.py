"""Versioned pipeline configuration (YAML) and deterministic RNG streams."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path
from typing import Any

import numpy as np
import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "process": {
        "components": [
            {"kind": "tom_quantum", "name": "tom_quantum", "alpha": 1.51, "beta": 3.07},
            {"kind": "tom_quantum", "name": "tom_quantum_1", "alpha": 1.99, "beta": 2.51},
            {"kind": "mess3", "name": "mess3", "x": 0.05, "a": 0.85},
            {"kind": "mess3", "name": "mess3_1", "x": 0.075, "a": 0.90},
            {"kind": "mess3", "name": "mess3_2", "x": 0.10, "a": 0.95},
        ],
    },
    "lm": {
        "d_model": 128, "n_heads": 4, "n_layers": 3, "context_length": 16,
        "steps": 3000, "batch": 64, "lr": 1e-3, "warmup": 200, "weight_decay": 0.01,
        "grad_clip": 1.0, "eval_sequences": 2048,
    },
    "data": {
        # "toy" samples from the process; "external" uses imported dumps only
        "source": "toy",
        "capture_sequences": 4000,
        "analysis_sequences": 1000,
        "layers": [1],
        "external_dumps": [],
    },
    "sae": {"d_sae": 256, "k_grid": [12], "steps": 20000, "batch": 256, "lr": 1e-3, "dead_window": 2000},
    "clustering": {
        "K": 6, "r_max": 3, "tau": 0.9, "max_iters": 100, "rank_min": 3, "rank_max": None,
        "null_partitions": 1,
    },
    "aanet": {
        "Ks": [2, 3, 4, 5], "steps": 1500, "restarts": 3, "hidden": [256, 128], "lr": 1e-3, "batch": 256,
        "lambda_simplex": 1.0, "lambda_nonneg": 1.0, "lambda_anchor": 0.1, "lambda_cycle": 1.0, "theta": 0.15,
        "max_rows": 8000, "fallback_K": 3,
    },
    "validation": {
        "v_thresh": 0.8, "i_thresh": 0.6, "cap": 200, "n_tokens": 50, "folds": 5, "ridge": 1e-6,
        "kl_pairs": 10000, "kl_eps": 1e-9, "alpha": 1e-3, "noise_threshold": 0.1, "heldout_fraction": 0.5,
    },
    "steering": {
        "scales": [1, 5, 20], "modes": ["type1", "type2", "type3"], "k_sustain": 2, "length": 3,
        "prompts_per_vertex": 10,
    },
}

PAPER_PROFILE = {
    "lm": {"steps": 50000, "lr": 3e-4},
    "data": {"layers": [0, 1, 2]},
    "sae": {"k_grid": [3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 19, 22, 25]},
    "aanet": {"Ks": [2, 3, 4, 5, 6, 7], "steps": 10000, "restarts": 5},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def build_config(overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, overrides or {})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None, seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version {version!r} not supported (expected {SCHEMA_VERSION})")
    cfg = build_config(raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)


def validate(cfg: dict) -> None:
    if cfg["data"]["source"] not in ("toy", "external"):
        raise ConfigError("data.source must be 'toy' or 'external'")
    if cfg["lm"]["d_model"] % cfg["lm"]["n_heads"]:
        raise ConfigError("lm.d_model must be divisible by lm.n_heads")
    for k in cfg["sae"]["k_grid"]:
        if not 1 <= k <= cfg["sae"]["d_sae"]:
            raise ConfigError(f"sae k={k} outside [1, d_sae]")
    if len(cfg["aanet"]["Ks"]) < 3:
        raise ConfigError("aanet.Ks needs at least 3 values for elbow detection")
    v = cfg["validation"]
    if not v["i_thresh"] < v["v_thresh"]:
        raise ConfigError("validation.i_thresh must be below validation.v_thresh")
    for layer in cfg["data"]["layers"]:
        if not 0 <= layer < cfg["lm"]["n_layers"]:
            raise ConfigError(f"layer {layer} out of range")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stage_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named stream of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(stream.encode()),)))


def stage_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(stream.encode()),)).generate_state(1)[0])
