"""Run configuration: a strict JSON schema checked before any compute.

Each section lists its allowed keys with defaults. Keys marked ``REQUIRED``
have no default (temperature schedule, beta and learning rates must always
be spelled out). Unknown sections or keys are rejected.
"""
import json
import os

from .errors import ConfigError

REQUIRED = object()

SCHEMA = {
    "corpus": {
        "path": None,  # load an on-disk corpus instead of generating one
        "classes": 16,
        "per_class": 40,
        "size": 32,
        "noise": 0.05,
        "seed": None,  # None: the run seed
    },
    "tasks": {
        "n_classes": 4,
        "resolutions": [16, 32],
        "families": ["A", "B"],
        "train_frac": 0.8,
    },
    "supernet": {
        "cells": 2,
        "channels": 8,
        "prior_sigma": 0.01,
        "heads": {"16": 1, "32": 2},
    },
    "variational": {
        "tau0": REQUIRED,
        "tau_min": REQUIRED,
        "tau_decay": REQUIRED,
        "beta": REQUIRED,
        "weight_mode": "point",
        "mc_samples": 1,
    },
    "meta": {
        "epochs": 30,
        "tasks_per_epoch": 6,
        "inner_steps": None,
        "inner_lr": REQUIRED,
        "arch_lr": REQUIRED,
        "meta_lr": REQUIRED,
        "batch_size": 16,
    },
    "derive": {
        "tasks": 4,
        "family": None,
        "tau": None,  # None: the end-of-schedule temperature
    },
    "full": {
        "cells": 3,
        "channels": 8,
        "epochs": 10,
        "lr": REQUIRED,
        "batch_size": 16,
        "family": None,
    },
    "fast_adapt": {
        "epochs": 6,
        "arms": ["full", "frozen_arch", "scratch"],
        "family": None,
    },
    "pca": {
        "k": 2,
    },
    "fewshot": {
        "n_way": 5,
        "k_shot": 5,
        "query_per_way": 5,
        "tasks_per_update": 2,
        "search_inner_steps": 1,
        "eval_inner_steps": 5,
        "inner_lr": REQUIRED,
        "arch_lr": None,
        "meta_lr": REQUIRED,
        "search_iterations": 500,
        "eval_iterations": 100,
        "eval_episodes": 200,
        "derive_episodes": 4,
        "first_order": False,
        "softmax_arch": False,
        "tau": 1.0,
        "resolution": 16,
        "test_classes": 2,
        "family": None,
        "cells": 2,
        "channels": 8,
    },
}

TOP_LEVEL = {"seed": 0, "out": "runs/default", "workers": 1}


def _check_type(where, value, default):
    if default is None or default is REQUIRED:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def validate(raw, need=()):
    """Fill defaults and check every section; ``need`` lists sections that must exist."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SCHEMA) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {}
    for k, d in TOP_LEVEL.items():
        v = raw.get(k, d)
        _check_type(k, v, d)
        cfg[k] = v
    for sec in need:
        if sec not in raw:
            raise ConfigError(f"missing config section {sec!r}")
    for sec, fields in SCHEMA.items():
        if sec not in raw:
            continue
        given = raw[sec]
        if not isinstance(given, dict):
            raise ConfigError(f"section {sec!r} must be an object")
        bad = set(given) - set(fields)
        if bad:
            raise ConfigError(f"unknown keys in {sec!r}: {sorted(bad)}")
        out = {}
        for k, d in fields.items():
            if k not in given:
                if d is REQUIRED:
                    raise ConfigError(f"{sec}.{k} is required")
                out[k] = d
                continue
            _check_type(f"{sec}.{k}", given[k], d)
            out[k] = given[k]
        cfg[sec] = out
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def load(path, need=()):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return validate(raw, need)


def out_dir(cfg):
    # the environment wins over the config file
    return os.environ.get("BASENAS_OUT") or cfg["out"]
