"""Experiment configuration: JSON file, dot-path overrides, stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import UnlearnError


class ConfigError(UnlearnError, ValueError):
    """Malformed config file or override."""


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "source": "synth",  # synth | idx
        "images": None,
        "labels": None,
        "classes": [1, 3, 8],
        "forget_class": 1,
        "synth": {"n": 600, "seed": 0, "noise_std": 0.05},
    },
    "model": {
        "input_dim": 784,
        "hidden_dims": [256, 64],
        "latent_dim": 16,
        "activation": "tanh",
        "likelihood": "bernoulli",
        "obs_std": 1.0,
    },
    "train": {"lr": 5e-4, "epochs": 30, "batch_size": 128},
    "unlearn": {
        "lr": 5e-4,
        "epochs": 1,
        "retain_batch": 256,
        "forget_batch": 64,
        "projection": "always",
        "loss": "elbo",
        "optimizer": "sgd",
        "params": "all",
    },
    "classifier": {"hidden": [128, 32], "epochs": 30, "lr": 1e-3, "batch_size": 64, "restarts": 3},
    "eval": {"n_samples": 10000, "seed": 0, "reference": "all"},
    "influence": {
        "target": "vae",  # vae | probe
        "n_pairs": 100,
        "forget_batch": 32,
        "zprime_batch": 1,
        "hessian_subsample": 256,
        "loss_influence": False,
        "damping": 1e-3,
        "cg_tol": 1e-8,
        "cg_max_iter": 200,
        "eps_fd": 1e-4,
        "probe": {"n": 200, "d": 20, "lam": 1e-2},
    },
    "repro": {"seeds": [0], "ascent_lrs": [1e-4, 2e-4, 3e-4, 4e-4, 5e-4]},
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config field {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {path!r} must be an object")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def parse_value(text: str):
    """Decode an override value as JSON, falling back to the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, spec: str) -> dict:
    """Apply ``a.b.c=value`` (a leading ``--`` is accepted)."""
    body = spec[2:] if spec.startswith("--") else spec
    if "=" not in body:
        raise ConfigError(f"override {spec!r} is not of the form --key.path=value")
    path, raw = body.split("=", 1)
    keys = path.split(".")
    patch: dict = {}
    node = patch
    for k in keys[:-1]:
        node[k] = {}
        node = node[k]
    node[keys[-1]] = parse_value(raw)
    return _merge(cfg, patch)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then overrides in order."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = _merge(cfg, raw)
    for spec in overrides:
        cfg = apply_override(cfg, spec)
    return cfg


def config_hash(cfg: dict) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form.

    ``output_dir`` is left out: where artifacts land does not change them.
    """
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
