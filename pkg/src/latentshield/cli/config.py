"""Experiment config: JSON schema, loading and defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

SCHEMA_VERSION = 1

_DATASET = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "per_domain": {"type": "integer", "minimum": 0},
        "size": {"type": "integer", "minimum": 4},
        "seed": {"type": "integer"},
        "style": {"enum": ["base", "alt"]},
    },
}

_AE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "latent_channels": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "decoder_width": {"type": "integer", "minimum": 1},
        "n_down": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "max_epochs": {"type": "integer", "minimum": 1},
        "rmse_threshold": {"type": "number", "exclusiveMinimum": 0},
        "heldout_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer"},
    },
}

_NOISE_MODEL_PROPS = {
    "emb_dim": {"type": "integer", "minimum": 2},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "epochs": {"type": "integer", "minimum": 1},
    "cond_dropout": {"type": "number", "minimum": 0, "maximum": 1},
    "val_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "seed": {"type": "integer"},
    "T": {"type": "integer", "minimum": 2},
    "beta_start": {"type": "number", "exclusiveMinimum": 0},
    "beta_end": {"type": "number", "exclusiveMinimum": 0},
    "schedule": {"enum": ["linear", "cosine"]},
    "width": {"type": "integer", "minimum": 1},
}

_DN = {"type": "object", "additionalProperties": False,
       "properties": dict(_NOISE_MODEL_PROPS, depth={"type": "integer", "minimum": 1})}
_PX = {"type": "object", "additionalProperties": False, "properties": dict(_NOISE_MODEL_PROPS)}

_LDM_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "checkpoint": {"type": ["string", "null"]},
        "autoencoder": _AE,
        "denoiser": _DN,
    },
}

_PIXEL_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"checkpoint": {"type": ["string", "null"]}, "pixel_dm": _PX},
}

_ATTACK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"enum": ["advdm", "advdm_minus", "photoguard", "mist", "sds_plus", "sds_minus", "sdst"]},
        "budget": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "step": {"type": "number", "exclusiveMinimum": 0},
        "iters": {"type": "integer", "minimum": 0},
        "textural_weight": {"type": "number", "minimum": 0},
        "target_image": {"type": ["string", "null"]},
        "mc_samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
}

_EDIT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["sdedit", "inpaint", "embed_invert"]},
        "strength": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "steps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "mask": {"type": ["string", "null"]},
        "cond": {"type": ["integer", "null"]},
        "iters": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "count": {"type": "integer", "minimum": 0},
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": "sdedit"}}}, "then": {"required": ["strength"]}},
        {"if": {"properties": {"kind": {"const": "inpaint"}}}, "then": {"required": ["mask"]}},
    ],
}

_DIAG = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "budget_ratio": {"type": "boolean"},
        "reflection": {"type": "boolean"},
        "strength": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "robustness_budgets": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "robustness_images": {"type": "integer", "minimum": 1},
        "loss_curves": {"type": "boolean"},
        "loss_curve_images": {"type": "integer", "minimum": 1},
        "transfer": {"type": "boolean"},
        "pixel_probe": {"type": "boolean"},
        "pixel_probe_images": {"type": "integer", "minimum": 1},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "output_dir"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "dataset": _DATASET,
        "eval_dataset": _DATASET,
        "models": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"primary": _LDM_SPEC, "transfer": {"oneOf": [_LDM_SPEC, {"type": "null"}]},
                           "pixel": {"oneOf": [_PIXEL_SPEC, {"type": "null"}]}},
        },
        "attacks": {"type": "array", "items": _ATTACK},
        "edits": {"type": "array", "items": _EDIT},
        "metrics": {"type": "array", "items": {"enum": ["ssim", "psnr", "feature_distance", "seconds_per_iter",
                                                         "ia_score", "frechet"]}},
        "min_count": {"type": "integer", "minimum": 1},
        "diagnostics": _DIAG,
    },
}

DEFAULTS = {
    "seed": 0,
    "dataset": {"per_domain": 512, "size": 32, "seed": 0, "style": "base"},
    "eval_dataset": {"per_domain": 16, "size": 32, "seed": 123, "style": "base"},
    "models": {"primary": {"checkpoint": None, "autoencoder": {}, "denoiser": {}},
               "transfer": None, "pixel": None},
    "attacks": [{"method": m} for m in
                ("advdm", "advdm_minus", "photoguard", "mist", "sds_plus", "sds_minus", "sdst")],
    "edits": [{"kind": "sdedit", "strength": 0.2}, {"kind": "sdedit", "strength": 0.3}],
    "metrics": ["ssim", "psnr", "feature_distance", "seconds_per_iter", "ia_score", "frechet"],
    "min_count": 1,
    "diagnostics": {"budget_ratio": True, "reflection": True, "strength": 0.3,
                    "robustness_budgets": [0.0, 16 / 255, 32 / 255, 1.0], "robustness_images": 32,
                    "loss_curves": True, "loss_curve_images": 8, "transfer": True,
                    "pixel_probe": True, "pixel_probe_images": 32},
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None


def load_config(path, seed_override=None) -> dict:
    """Read, validate and default-fill an experiment config.

    Relative paths inside the config resolve against the config file's folder.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    validate(raw)
    cfg = _merge(DEFAULTS, raw)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    base = path.resolve().parent
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    for key in ("primary", "transfer", "pixel"):
        spec = cfg["models"].get(key)
        if spec and spec.get("checkpoint"):
            spec["checkpoint"] = str((base / spec["checkpoint"]).resolve())
    for e in cfg["edits"]:
        if e.get("mask"):
            e["mask"] = str((base / e["mask"]).resolve())
    for a in cfg["attacks"]:
        if a.get("target_image") and a["target_image"] != "pattern":
            a["target_image"] = str((base / a["target_image"]).resolve())
    return cfg


def section_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
