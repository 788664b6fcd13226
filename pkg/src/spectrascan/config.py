"""Layered run configuration: defaults, then a JSON file, then command-line flags."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigurationError

DEFAULTS: dict = {
    # spectral estimation
    "gamma": 0.06,
    "n_basis": 8,
    "grid": {"start_nm": 410.0, "step_nm": 10.0, "count": 27},
    "visibility_eps": None,
    # reconstruction
    "w_p": 100.0,
    "merge_threshold_px": 0.5,
    "refine_intrinsics": True,
    "huber_px": None,
    "ransac_threshold_px": 1.0,
    "pnp_threshold_px": 2.0,
    "gate_px": 2.0,
    "contrast_floor": 0.05,
    "max_support": 64,
    # general
    "seed": 0,
    "threads": 1,
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Merge ``DEFAULTS``, an optional JSON file and explicit overrides.

    ``None`` values in ``overrides`` mean "not given" and are skipped.

    Raises:
        ConfigurationError: unreadable file or unknown key.
    """
    cfg = json.loads(json.dumps(DEFAULTS))
    layers = []
    if path is not None:
        try:
            layers.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(layers[-1], dict):
            raise ConfigurationError(f"config {path} must be a JSON object")
    layers.append({k: v for k, v in (overrides or {}).items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            cfg[key] = value
    if cfg["gamma"] < 0:
        raise ConfigurationError("gamma must be nonnegative")
    if cfg["w_p"] < 1:
        raise ConfigurationError("w_p must be at least 1")
    if cfg["threads"] < 1:
        raise ConfigurationError("threads must be at least 1")
    return cfg
