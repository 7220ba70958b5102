"""Procedural image datasets and image/manifest IO.

Four sub-datasets stand in for distinct visual domains. Each is a class id
for the conditional denoiser:

    0 ``flat``       flat-coloured shapes with dark outlines
    1 ``painterly``  oriented brush-stroke textures
    2 ``scenery``    sky gradient, horizon, ridge line and sun
    3 ``figure``     head-and-shoulders silhouettes with facial marks

Images are float32 arrays in [0, 1], layout (C, H, W).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DOMAINS = ("flat", "painterly", "scenery", "figure")


def _grid(size):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")  # xx, yy in (0, 1)


def _soft(sd, size):
    # anti-aliased inside-indicator from a signed distance (negative inside)
    return 1.0 / (1.0 + np.exp(np.clip(sd * size * 3.0, -40, 40)))


def _paint(img, mask, color):
    return img * (1 - mask[None]) + np.asarray(color)[:, None, None] * mask[None]


def _palette(rng, n, lo=0.15, hi=0.95):
    return rng.uniform(lo, hi, size=(n, 3))


def _flat(rng, size, style):
    xx, yy = _grid(size)
    img = np.ones((3, size, size)) * _palette(rng, 1, 0.55, 0.95)[0][:, None, None]
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        rx, ry = rng.uniform(0.1, 0.3, 2)
        d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) - 1.0
        d = d * min(rx, ry)
        outline = _soft(np.abs(d) - 0.025, size)
        img = _paint(img, _soft(d, size), _palette(rng, 1, 0.3, 1.0)[0])
        img = _paint(img, outline, np.full(3, 0.08))
    return img


def _painterly(rng, size, style):
    xx, yy = _grid(size)
    cols = _palette(rng, 3)
    img = np.zeros((3, size, size))
    weight = np.zeros((size, size))
    for k in range(3):
        th = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 5.0) * (1.6 if style == "alt" else 1.0)
        ph = rng.uniform(0, 2 * np.pi)
        u = np.cos(th) * xx + np.sin(th) * yy
        w = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + ph)
        w = 0.1 + w ** 2
        img += cols[k][:, None, None] * w[None]
        weight += w
    return img / weight[None]


def _scenery(rng, size, style):
    xx, yy = _grid(size)
    sky_top, sky_bot = _palette(rng, 1, 0.3, 0.7)[0], _palette(rng, 1, 0.6, 1.0)[0]
    horizon = rng.uniform(0.45, 0.7)
    t = np.clip(yy / horizon, 0, 1)
    img = sky_top[:, None, None] * (1 - t[None]) + sky_bot[:, None, None] * t[None]
    sx, sy, sr = rng.uniform(0.15, 0.85), rng.uniform(0.1, 0.35), rng.uniform(0.05, 0.12)
    sun = _soft(np.sqrt((xx - sx) ** 2 + (yy - sy) ** 2) - sr, size)
    img = _paint(img, sun, np.array([1.0, 0.9, 0.5]))
    a, f, p = rng.uniform(0.05, 0.15), rng.uniform(1, 3), rng.uniform(0, 2 * np.pi)
    ridge = horizon - 0.1 - a * np.abs(np.sin(np.pi * f * xx + p))
    img = _paint(img, _soft(ridge - yy, size), _palette(rng, 1, 0.2, 0.5)[0])
    ground = _palette(rng, 1, 0.15, 0.6)[0]
    img = _paint(img, _soft(horizon - yy, size), ground)
    return img


def _figure(rng, size, style):
    xx, yy = _grid(size)
    img = np.ones((3, size, size)) * _palette(rng, 1, 0.2, 0.8)[0][:, None, None]
    cx = rng.uniform(0.4, 0.6)
    skin = np.array([0.95, 0.75, 0.6]) * rng.uniform(0.6, 1.05)
    shoulders = np.sqrt(((xx - cx) / 0.45) ** 2 + ((yy - 1.05) / 0.3) ** 2) - 1.0
    img = _paint(img, _soft(shoulders * 0.3, size), _palette(rng, 1, 0.1, 0.8)[0])
    rx, ry, cy = rng.uniform(0.17, 0.23), rng.uniform(0.22, 0.28), rng.uniform(0.42, 0.5)
    head = (np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) - 1.0) * rx
    hair = (np.sqrt(((xx - cx) / (rx * 1.1)) ** 2 + ((yy - cy + 0.06) / (ry * 1.05)) ** 2) - 1.0) * rx
    img = _paint(img, _soft(hair, size), _palette(rng, 1, 0.05, 0.5)[0])
    img = _paint(img, _soft(head, size), skin)
    for ex in (-0.07, 0.07):
        eye = np.sqrt((xx - cx - ex) ** 2 + (yy - cy + 0.02) ** 2) - 0.03
        img = _paint(img, _soft(eye, size), np.full(3, 0.1))
    mouth = np.maximum(np.abs(yy - cy - 0.1) - 0.012, np.abs(xx - cx) - 0.06)
    img = _paint(img, _soft(mouth, size), np.array([0.6, 0.2, 0.2]))
    return img


_RENDER = {"flat": _flat, "painterly": _painterly, "scenery": _scenery, "figure": _figure}


@dataclass
class ImageSet:
    """A set of images with integer class labels (domain ids)."""

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.labels[idx], dict(self.meta))

    def domain(self, d) -> "ImageSet":
        if isinstance(d, str):
            d = DOMAINS.index(d)
        return self.subset(np.flatnonzero(self.labels == d))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


def make_dataset(per_domain: int, size: int = 32, seed: int = 0, style: str = "base",
                 domains=DOMAINS) -> ImageSet:
    """Render ``per_domain`` images for each domain. Deterministic per seed.

    ``style="alt"`` renders a style-shifted variant of the same domains.
    """
    rng = np.random.default_rng([seed, 0 if style == "base" else 1])
    imgs, labels = [], []
    for d, name in enumerate(DOMAINS):
        if name not in domains:
            continue
        drng = np.random.default_rng(rng.integers(2 ** 63))
        for _ in range(per_domain):
            img = _RENDER[name](drng, size, style)
            if style == "alt":
                img = img[[2, 0, 1]]
            imgs.append(np.clip(img, 0, 1))
            labels.append(d)
    images = np.stack(imgs).astype(np.float32) if imgs else np.zeros((0, 3, size, size), np.float32)
    return ImageSet(images, np.asarray(labels, dtype=np.int64),
                    {"generator": "procedural", "seed": seed, "style": style, "size": size})


def constant_dataset(n: int, size: int = 32, value=0.5) -> ImageSet:
    images = np.full((n, 3, size, size), value, dtype=np.float32)
    return ImageSet(images, np.zeros(n, dtype=np.int64), {"generator": "constant"})


def target_pattern(size: int = 32, channels: int = 3, period: int = 4) -> np.ndarray:
    """Default textural target: a high-contrast periodic pattern.

    Diagonal stripes in the first channel, a checker in the second and
    concentric rings in the third, all binarized.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = ((xx + yy) // period) % 2
    checker = ((xx // period) + (yy // period)) % 2
    r = np.sqrt((xx - size / 2 + 0.5) ** 2 + (yy - size / 2 + 0.5) ** 2)
    rings = (r // period) % 2
    pat = np.stack([stripes, checker, rings][:channels] if channels <= 3 else [stripes] * channels)
    return pat.astype(np.float32)


# -- IO ---------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_png(img, path) -> None:
    img = np.asarray(img)
    arr = to_uint8(img)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype == bool:
        arr = arr.astype(np.float32)
        return arr[None]
    arr = arr.astype(np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def save_mask_png(mask, path) -> None:
    m = (np.asarray(mask).reshape(mask.shape[-2:]) > 0.5)
    Image.fromarray(m).convert("1").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    m = np.asarray(Image.open(path).convert("1"), dtype=np.float32)
    return m[None]


def save_array(arr, path) -> None:
    np.savez(path, data=np.asarray(arr, dtype=np.float32))


def load_array(path) -> np.ndarray:
    with np.load(path) as f:
        return f["data"]


def write_dataset(ds: ImageSet, out_dir, name: str = "dataset") -> Path:
    """Write PNGs plus a manifest JSON listing files and labels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        fname = f"{DOMAINS[lab]}_{i:05d}.png"
        save_png(img, out / fname)
        entries.append({"file": fname, "label": int(lab), "domain": DOMAINS[lab]})
    manifest = {"name": name, "domains": list(DOMAINS), "meta": ds.meta, "images": entries}
    path = out / "manifest.json"
    _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_dataset(manifest_path) -> ImageSet:
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    imgs = [load_png(root / e["file"]) for e in man["images"]]
    labels = [e["label"] for e in man["images"]]
    size = man.get("meta", {}).get("size", 32)
    images = np.stack(imgs).astype(np.float32) if imgs else np.zeros((0, 3, size, size), np.float32)
    return ImageSet(images, np.asarray(labels, dtype=np.int64), man.get("meta", {}))


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
