"""Purification defenses applied to (possibly protected) images before editing."""

from __future__ import annotations

import io
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..data import to_uint8

JPEG_QUALITY = 65
CROP_FRAC = 0.20


@dataclass(frozen=True)
class SmoothParams:
    """Edge-preserving smoothing: repeated bilateral filtering followed by a
    guided filter self-guided on the result."""

    bilateral_d: int = 5
    sigma_color: float = 0.1
    sigma_space: float = 1.5
    bilateral_iters: int = 2
    guided_radius: int = 2
    guided_eps: float = 1e-3


def _apply(x, fn):
    t = torch.as_tensor(x)
    if t.dim() == 4:
        return torch.stack([_apply(im, fn) for im in t])
    out = fn(t.detach().cpu().numpy().astype(np.float32))
    return torch.from_numpy(np.ascontiguousarray(out, dtype=np.float32))


def _jpeg_one(img, quality):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def purify_jpeg(x, quality: int = JPEG_QUALITY) -> torch.Tensor:
    """JPEG encode/decode round trip (PIL) at ``quality``."""
    if not 1 <= quality <= 100:
        raise ValueError("JPEG quality must lie in [1, 100]")
    return _apply(x, lambda im: _jpeg_one(im, quality))


def purify_crop_resize(x, crop_frac: float = CROP_FRAC) -> torch.Tensor:
    """Center-crop away ``crop_frac`` of each side length, resize back bilinearly."""
    if not 0 <= crop_frac < 1:
        raise ValueError("crop_frac must lie in [0, 1)")
    t = torch.as_tensor(x, dtype=torch.float32)
    single = t.dim() == 3
    if single:
        t = t[None]
    h, w = t.shape[-2:]
    ch, cw = max(1, round(h * (1 - crop_frac))), max(1, round(w * (1 - crop_frac)))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = t[..., top:top + ch, left:left + cw]
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    return out[0] if single else out


def _guided(I, p, r, eps):
    box = lambda a: cv2.boxFilter(a, -1, (2 * r + 1, 2 * r + 1), borderType=cv2.BORDER_REFLECT)
    mi, mp = box(I), box(p)
    a = (box(I * p) - mi * mp) / (box(I * I) - mi * mi + eps)
    b = mp - a * mi
    return box(a) * I + box(b)


def _smooth_one(img, params: SmoothParams):
    hwc = np.ascontiguousarray(img.transpose(1, 2, 0))
    for _ in range(params.bilateral_iters):
        hwc = cv2.bilateralFilter(hwc, params.bilateral_d, params.sigma_color, params.sigma_space)
    out = np.stack([_guided(hwc[..., c], hwc[..., c], params.guided_radius, params.guided_eps)
                    for c in range(hwc.shape[-1])], axis=0)
    return np.clip(out, 0, 1)


def purify_smooth(x, params: SmoothParams = SmoothParams()) -> torch.Tensor:
    """Edge-preserving smoothing filter removing high-frequency noise."""
    return _apply(x, lambda im: _smooth_one(im, params))


PURIFIERS = {
    "jpeg": purify_jpeg,
    "crop_resize": purify_crop_resize,
    "smooth": purify_smooth,
}
