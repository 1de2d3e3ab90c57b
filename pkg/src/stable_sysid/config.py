"""JSON run configurations: schemas, validation and object construction."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ContractError
from .model import LossSpec, StateSpaceModel
from .synth import stream
from .trainer import TrainConfig

SEED_ENV = "STABLE_SYSID_SEED"

_MATRIX = {
    "oneOf": [
        {"type": "null"},
        {"type": "string"},
        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    ]
}
_POS_INT = {"type": "integer", "minimum": 1}
_OPT_HORIZON = {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 2}]}
_LOSS = {"enum": ["mse", "mae", "mape"]}

MODEL_KEYS = {
    "n": _POS_INT,
    "input_output": {"type": "boolean"},
    "autonomous": {"type": "boolean"},
    "id_D": {"type": "boolean"},
    "learn_x0": {"type": "boolean"},
    "stable_A": {"type": "boolean"},
    "naive_A": {"type": "boolean"},
    "LMI_A": {"type": "boolean"},
    "delta": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
    "max_eigenvalue": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "epsilon": {"type": "number", "exclusiveMinimum": 0},
    "mask_A": _MATRIX,
    "mask_B": _MATRIX,
    "mask_C": _MATRIX,
    "mask_D": _MATRIX,
    "learn_A": {"type": "boolean"},
    "learn_B": {"type": "boolean"},
    "learn_C": {"type": "boolean"},
    "learn_D": {"type": "boolean"},
    "init_std": {"type": "number", "exclusiveMinimum": 0},
}

TRAIN_KEYS = {
    "max_epochs": _POS_INT,
    "batch_size": _POS_INT,
    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "grad_clip": {"type": "number", "exclusiveMinimum": 0},
    "init_learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "init_epochs": {"type": "integer", "minimum": 0},
    "init_grad_clip": {"type": "number", "exclusiveMinimum": 0},
    "init_loss": {"enum": ["mse", "mae"]},
    "init_from_ls": {"type": "boolean"},
    "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "loss": _LOSS,
    "val_loss": _LOSS,
    "normalization": {"enum": ["retained", "length"]},
    "horizon": _OPT_HORIZON,
    "stride": _POS_INT,
    "horizon_val": _OPT_HORIZON,
    "stride_val": _POS_INT,
    "patience": {"oneOf": [{"type": "null"}, _POS_INT]},
    "stability_check_every": _POS_INT,
    "seed": {"type": "integer", "minimum": 0},
}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["train"],
    "properties": {
        "train": {"type": "string"},
        "val": {"type": "string"},
        "test": {"type": "string"},
        "output_dir": {"type": "string"},
        **MODEL_KEYS,
        **TRAIN_KEYS,
    },
}

GENERATOR_KEYS = {
    "n": _POS_INT,
    "m": _POS_INT,
    "p": _POS_INT,
    "target_spectral_radius": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "sparsity_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "noise_std": {"type": "number", "minimum": 0},
    "gbn_switch_prob": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "trajectory_length": {"type": "integer", "minimum": 2},
    "target_kind": {"enum": ["output", "state"]},
    "feedthrough": {"type": "boolean"},
    "train_trajectories": _POS_INT,
}

_METHOD = {
    "type": "object",
    "additionalProperties": False,
    "properties": {**MODEL_KEYS, **TRAIN_KEYS, "masks_from_truth": {"type": "boolean"}},
}

BENCH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["generator", "systems", "methods"],
    "properties": {
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "m", "p"],
            "properties": GENERATOR_KEYS,
        },
        "systems": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "methods": {"type": "object", "minProperties": 2, "additionalProperties": _METHOD},
        "base": _METHOD,
        "output_dir": {"type": "string"},
    },
}


def validate(cfg: dict, schema: dict, what: str = "config"):
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ContractError(f"invalid {what} at {where}: {exc.message}") from None


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not valid JSON ({exc})") from None


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def parse_override(text: str):
    """``key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ContractError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg: dict, overrides) -> dict:
    out = copy.deepcopy(cfg)
    for item in overrides or ():
        key, value = parse_override(item)
        out[key] = value
    return out


def resolve_seed(cfg: dict) -> int:
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ContractError(f"{SEED_ENV}={env!r} is not an integer") from None
        if seed < 0:
            raise ContractError(f"{SEED_ENV} must be non-negative")
        return seed
    return 0


def _mask_value(value, name: str, base: Path | None, truth: dict | None):
    if value is None:
        return None
    if isinstance(value, str):
        path = Path(value) if base is None else base / value
        doc = load_json(path)
        mat = doc.get("matrices", {}).get(name[-1])
        if mat is None:
            raise ContractError(f"{path} has no matrix {name[-1]}")
        return (np.asarray(mat) != 0).astype(np.float64)
    return np.asarray(value, dtype=np.float64)


def build_model(cfg: dict, n: int, m: int, p: int | None, target_kind: str, seed: int,
                base: Path | None = None, truth_masks: dict | None = None) -> StateSpaceModel:
    """Model from the flag keys of ``cfg`` for data of the given shape."""
    input_output = cfg.get("input_output", target_kind == "output")
    if input_output != (target_kind == "output"):
        raise ContractError(f"input_output={input_output} does not match {target_kind} data")
    masks = {}
    for name in ("mask_A", "mask_B", "mask_C", "mask_D"):
        masks[name] = _mask_value(cfg.get(name), name, base, None)
        if truth_masks is not None and masks[name] is None:
            masks[name] = truth_masks.get(name[-1])
    if not input_output:
        masks["mask_C"] = masks["mask_D"] = None
    if not cfg.get("id_D", False):
        masks["mask_D"] = None
    kwargs = {k: cfg[k] for k in ("autonomous", "id_D", "learn_x0", "stable_A", "naive_A", "LMI_A", "delta",
                                  "max_eigenvalue", "epsilon", "learn_A", "learn_B", "learn_C", "learn_D",
                                  "init_std") if k in cfg}
    return StateSpaceModel(n, m, p if input_output else None, input_output=input_output, **masks, **kwargs,
                           rng=stream(seed, 100))


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    keys = ("max_epochs", "batch_size", "learning_rate", "grad_clip", "init_learning_rate", "init_epochs",
            "init_grad_clip", "init_loss", "init_from_ls", "horizon", "stride", "horizon_val", "stride_val",
            "patience", "stability_check_every")
    kwargs = {k: cfg[k] for k in keys if k in cfg}
    norm = cfg.get("normalization", "retained")
    train_loss = LossSpec(cfg.get("loss", "mse"), cfg.get("dropout", 0.0), normalization=norm)
    val_loss = LossSpec(cfg.get("val_loss", cfg.get("loss", "mse")), 0.0, normalization=norm)
    return TrainConfig(**kwargs, train_loss=train_loss, val_loss=val_loss, seed=seed)


__all__ = [
    "FIT_SCHEMA",
    "BENCH_SCHEMA",
    "SEED_ENV",
    "validate",
    "load_json",
    "canonical",
    "config_hash",
    "apply_overrides",
    "resolve_seed",
    "build_model",
    "build_train_config",
]
