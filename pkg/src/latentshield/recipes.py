"""Default datasets and model recipes, with an on-disk cache of trained bundles.

The cache root is ``$LATENTSHIELD_CACHE`` if set, else ``~/.cache/latentshield``.
Cached checkpoints are keyed by a hash of the recipe, so editing a recipe
never serves a stale model.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageSet, make_dataset
from .models import (AutoencoderConfig, DenoiserConfig, PixelDmConfig, config_hash, train_ldm,
                     train_pixel_dm)

log = logging.getLogger(__name__)

TRAIN_PER_DOMAIN = 512
EVAL_PER_DOMAIN = 16
IMAGE_SIZE = 32
TRAIN_SEED = 0
EVAL_SEED = 123

RECIPES = {
    "ldm_a": {"kind": "ldm", "ae": AutoencoderConfig(seed=0), "dn": DenoiserConfig(seed=0)},
    "ldm_b": {"kind": "ldm", "ae": AutoencoderConfig(seed=1), "dn": DenoiserConfig(seed=1)},
    "pixel": {"kind": "pixel", "px": PixelDmConfig(seed=0)},
}


def cache_root() -> Path:
    env = os.environ.get("LATENTSHIELD_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "latentshield"


def train_set() -> ImageSet:
    return make_dataset(TRAIN_PER_DOMAIN, IMAGE_SIZE, seed=TRAIN_SEED)


def eval_set(per_domain: int = EVAL_PER_DOMAIN) -> ImageSet:
    return make_dataset(per_domain, IMAGE_SIZE, seed=EVAL_SEED)


def recipe_hash(name: str) -> str:
    r = RECIPES[name]
    desc = {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in r.items()}
    desc["data"] = [TRAIN_PER_DOMAIN, IMAGE_SIZE, TRAIN_SEED]
    return config_hash(desc)


def train_recipe(name: str, dataset: ImageSet = None):
    r = RECIPES[name]
    dataset = dataset if dataset is not None else train_set()
    if r["kind"] == "ldm":
        return train_ldm(dataset, r["ae"], r["dn"])
    return train_pixel_dm(dataset, r["px"])


def load_or_train(name: str, root=None):
    """Return the cached bundle for recipe ``name``, training it on a miss."""
    root = Path(root) if root is not None else cache_root()
    path = root / "models" / f"{name}-{recipe_hash(name)}.lshd"
    if path.exists():
        return load_checkpoint(path)
    log.info("training %s (cache miss at %s)", name, path)
    bundle = train_recipe(name)
    save_checkpoint(bundle, path)
    return load_checkpoint(path)
