"""Contextual rescoring of object detections under universal perturbations."""

import json as _json

from ._core import (
    BACKGROUND,
    IMAGE_SIDE,
    NUM_CATEGORIES,
    ConfigError,
    ConsistencyError,
    Error,
    ParseError,
    PrerequisiteError,
    auc,
    average_precision,
    category_name,
    default_config,
    f1_micro,
    generate_dataset,
    grad_check,
    iou,
    map_sweep,
    positional_encoding,
    run_stage,
    scg_minimize,
    softmax,
    split_seed,
    thread_count,
)

__all__ = [
    "BACKGROUND",
    "IMAGE_SIDE",
    "NUM_CATEGORIES",
    "ConfigError",
    "ConsistencyError",
    "Error",
    "ParseError",
    "PrerequisiteError",
    "auc",
    "average_precision",
    "category_name",
    "config",
    "default_config",
    "f1_micro",
    "generate_dataset",
    "grad_check",
    "iou",
    "map_sweep",
    "positional_encoding",
    "run_stage",
    "scg_minimize",
    "softmax",
    "split_seed",
    "thread_count",
]


def config(**overrides):
    """Default run config as a dict, with top-level sections merged from `overrides`."""
    cfg = _json.loads(default_config())
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg
