"""Image-quality and protection metrics.

Perceptual, distributional and alignment scores are feature-based analogs
computed on the toy encoder's standardized latents (full spatial resolution),
not the pretrained-network metrics they stand in for.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

PSNR_CAP = 99.0
SSIM_WINDOW = 7
HF_CUTOFF = 0.25
MIN_SET_SIZE = 32
FEATURE_POOL = 1


class MetricError(ValueError):
    pass


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def ssim(a, b) -> float:
    """Windowed SSIM (7x7 uniform window, K1=0.01, K2=0.03) of two (C, H, W)
    images in [0, 1], averaged over channels."""
    a, b = _np(a), _np(b)
    _same_shape(a, b)
    if a.ndim == 2:
        return float(structural_similarity(a, b, win_size=SSIM_WINDOW, data_range=1.0))
    return float(structural_similarity(a, b, win_size=SSIM_WINDOW, data_range=1.0, channel_axis=0))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 99 dB."""
    a, b = _np(a), _np(b)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


@torch.no_grad()
def features(x, bundle, pool: int = FEATURE_POOL, batch_size: int = 256) -> np.ndarray:
    """Flattened standardized encoder latents (optionally average-pooled), shape (B, D)."""
    x = torch.as_tensor(_np(x), dtype=torch.float32)
    if x.dim() == 3:
        x = x[None]
    out = []
    for i in range(0, x.shape[0], batch_size):
        z = bundle.normalize(bundle.encode(x[i:i + batch_size]))
        if pool > 1:
            z = F.avg_pool2d(z, pool)
        out.append(z.flatten(1).double().numpy())
    if not out:
        return np.zeros((0, 0))
    return np.concatenate(out)


def cosine(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; zero vectors give 0 unless both are zero (1)."""
    fa, fb = np.atleast_2d(fa), np.atleast_2d(fb)
    na, nb = np.linalg.norm(fa, axis=1), np.linalg.norm(fb, axis=1)
    dot = np.sum(fa * fb, axis=1)
    denom = na * nb
    out = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    both_zero = (na == 0) & (nb == 0)
    return np.clip(np.where(both_zero, 1.0, out), -1.0, 1.0)


def ia_score(a, b, bundle):
    """Feature-based alignment: cosine similarity of encoder features.
    Scalar for single images, array for batches."""
    fa, fb = features(a, bundle), features(b, bundle)
    _same_shape(fa, fb)
    s = cosine(fa, fb)
    return float(s[0]) if _np(a).ndim == 3 else s


feature_similarity = ia_score


def feature_distance(a, b, bundle):
    """Feature-based perceptual distance: RMS difference of encoder features."""
    fa, fb = features(a, bundle), features(b, bundle)
    _same_shape(fa, fb)
    d = np.sqrt(np.mean((fa - fb) ** 2, axis=1))
    return float(d[0]) if _np(a).ndim == 3 else d


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses the symmetric form ``(S1^(1/2) S2 S1^(1/2))^(1/2)``,
    which has the same trace and stays real for PSD inputs.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.atleast_2d(s1).astype(np.float64), np.atleast_2d(s2).astype(np.float64)
    r1 = _psd_sqrt(s1)
    w = np.linalg.eigvalsh(r1 @ s2 @ r1)
    cross = np.sum(np.sqrt(np.clip(w, 0, None)))
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * cross)
    return max(d, 0.0)


def _psd_sqrt(s):
    s = (s + s.T) / 2
    w, v = np.linalg.eigh(s)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    if fa.shape[0] < MIN_SET_SIZE or fb.shape[0] < MIN_SET_SIZE:
        raise MetricError(f"Frechet distance needs >= {MIN_SET_SIZE} samples per set, "
                          f"got {fa.shape[0]} and {fb.shape[0]}")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def frechet_feature_distance(set_a, set_b, bundle) -> float:
    """Feature-based distributional distance between two image sets."""
    return frechet_from_features(features(set_a, bundle), features(set_b, bundle))


def high_frequency_energy(x, cutoff: float = HF_CUTOFF):
    """Fraction of non-DC spectral power above ``cutoff`` x Nyquist radial
    frequency. 0 for images with no AC power. Array for batches."""
    a = _np(x)
    if a.ndim == 4:
        return np.array([high_frequency_energy(im, cutoff) for im in a])
    if a.ndim == 2:
        a = a[None]
    h, w = a.shape[-2:]
    a = a - a.mean(axis=(-2, -1), keepdims=True)
    power = np.abs(np.fft.fft2(a)) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2) / 0.5
    total = power.sum()
    if total <= 1e-20:
        return 0.0
    return float(power[..., radius > cutoff].sum() / total)
