"""Bottleneck analyses: latent-space budget amplification, round-trip
reflection, denoiser robustness, SDS vs exact loss curves, cross-model
transfer and the pixel-space diffusion probe.

Every probe is a pure function of its inputs and seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attacks import AttackConfig, latent_pgd, make_method, pgd_protect
from .data import DOMAINS
from .diffusion import q_sample
from .evaluation.metrics import cosine, features
from .threats import sdedit

DEFAULT_STRENGTH = 0.3
REFERENCE_SEED_OFFSET = 7919


@dataclass
class BudgetRatioReport:
    delta_x: np.ndarray
    delta_z: np.ndarray
    ratio: np.ndarray  # NaN where delta_x == 0 (undefined)
    labels: Optional[np.ndarray] = None

    def median(self) -> float:
        r = self.ratio[np.isfinite(self.ratio)]
        return float(np.median(r)) if r.size else float("nan")

    def per_domain(self) -> dict:
        if self.labels is None:
            return {}
        out = {}
        for d, name in enumerate(DOMAINS):
            r = self.ratio[(self.labels == d) & np.isfinite(self.ratio)]
            if r.size:
                out[name] = {"median": float(np.median(r)), "mean": float(r.mean()), "count": int(r.size)}
        return out

    def histograms(self, bins: int = 20, range_=None) -> dict:
        """Per-domain histograms of the ratio (shared bin edges)."""
        finite = self.ratio[np.isfinite(self.ratio)]
        if range_ is None:
            range_ = (0.0, float(finite.max()) if finite.size else 1.0)
        edges = np.histogram_bin_edges(finite, bins=bins, range=range_)
        groups = {"all": np.isfinite(self.ratio)}
        if self.labels is not None:
            for d, name in enumerate(DOMAINS):
                groups[name] = (self.labels == d) & np.isfinite(self.ratio)
        return {name: np.histogram(self.ratio[m], bins=edges)[0] for name, m in groups.items()} | {"edges": edges}

    def write_histogram_csv(self, path, bins: int = 20) -> Path:
        h = self.histograms(bins)
        edges = h.pop("edges")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["domain", "bin_lo", "bin_hi", "count"])
            for name, counts in h.items():
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([name, f"{lo:.6g}", f"{hi:.6g}", int(c)])
        return path

    def write_csv(self, path) -> Path:
        rows = [{"image": i, "domain": DOMAINS[int(self.labels[i])] if self.labels is not None else "",
                 "delta_x": float(self.delta_x[i]), "delta_z": float(self.delta_z[i]),
                 "ratio": float(self.ratio[i]) if np.isfinite(self.ratio[i]) else "undefined"}
                for i in range(len(self.ratio))]
        return write_rows(rows, path)


def write_rows(rows: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return path


def _batch(x):
    x = torch.as_tensor(x, dtype=torch.float32)
    return x[None] if x.dim() == 3 else x


@torch.no_grad()
def budget_ratio(x, x_adv, bundle, labels=None) -> BudgetRatioReport:
    """l-inf perturbation size in pixel space ([0, 1] units) and in
    standardized latent space, and their ratio."""
    x, x_adv = _batch(x), _batch(x_adv)
    dx = (x_adv - x).flatten(1).abs().amax(1)
    dz = (bundle.to_diffusion(x_adv) - bundle.to_diffusion(x)).flatten(1).abs().amax(1)
    dx, dz = dx.double().numpy(), dz.double().numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dx > 0, dz / np.where(dx > 0, dx, 1.0), np.nan)
    return BudgetRatioReport(dx, dz, ratio, None if labels is None else np.asarray(labels))


def similarity(a, b, metric_bundle) -> np.ndarray:
    return cosine(features(a, metric_bundle), features(b, metric_bundle))


@torch.no_grad()
def roundtrip_reflection(x_adv, bundle, strength: float = DEFAULT_STRENGTH, seed: int = 0,
                         steps: Optional[int] = None, metric_bundle=None) -> np.ndarray:
    """Per-image similarity between the SDEdit output and the plain
    autoencoder round trip of the same input."""
    x_adv = _batch(x_adv)
    edited = sdedit(x_adv, bundle, strength, steps=steps, seed=seed)
    return similarity(edited, bundle.reconstruct(x_adv), metric_bundle or bundle)


@torch.no_grad()
def fixed_noise_loss(x, bundle, timesteps: Sequence[int], n_eps: int = 1, seed: int = 1234,
                     latent: bool = False) -> np.ndarray:
    """Per-sample noise-prediction error averaged over a fixed (t, eps) grid."""
    z0 = bundle.normalize(x) if latent else bundle.to_diffusion(_batch(x))
    gen = torch.Generator().manual_seed(seed)
    total = torch.zeros(z0.shape[0], dtype=torch.float64)
    count = 0
    for t in timesteps:
        for _ in range(n_eps):
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            ns = q_sample(z0, int(t), eps, bundle.schedule)
            pred = bundle.denoiser(ns.z_t, ns.t.expand(z0.shape[0]))
            total += ((pred - eps) ** 2).flatten(1).mean(1).double()
            count += 1
    return (total / count).numpy()


@torch.no_grad()
def denoiser_robustness_probe(bundle, x, budgets: Sequence[float], iters: int = 100, seed: int = 0,
                              strength: float = DEFAULT_STRENGTH, timesteps=(100, 300, 500, 700, 900),
                              metric_bundle=None) -> list:
    """Attack latents directly at each budget (standardized units), then measure
    the noise-prediction error increase and the similarity of
    SDEdit(decode(z_adv)) to SDEdit(decode(z)) under the same edit noise."""
    x = _batch(x)
    mb = metric_bundle or bundle
    z = bundle.encode(x)
    clean_img = bundle.decode(z)
    clean_edit = sdedit(clean_img, bundle, strength, seed=seed)
    base_loss = fixed_noise_loss(z, bundle, timesteps, latent=True)
    rows = []
    for budget in budgets:
        z_adv = latent_pgd(z, bundle, budget, iters=iters, seed=seed) if budget > 0 else z.clone()
        adv_loss = fixed_noise_loss(z_adv, bundle, timesteps, latent=True)
        if budget > 0:
            edit = sdedit(bundle.decode(z_adv), bundle, strength, seed=seed)
            sim = similarity(edit, clean_edit, mb)
        else:
            sim = np.ones(x.shape[0])
        rows.append({"budget": float(budget), "loss_clean": float(base_loss.mean()),
                     "loss_attacked": float(adv_loss.mean()),
                     "loss_delta": float((adv_loss - base_loss).mean()),
                     "similarity": float(sim.mean()), "n": int(x.shape[0])})
    return rows


@dataclass
class LossCurves:
    full: np.ndarray  # (n + 1,)
    sds: np.ndarray
    divergence: float
    full_seconds_per_iter: float
    sds_seconds_per_iter: float
    per_image: dict = field(default_factory=dict)


def loss_curve_compare(x, bundle, cfg_pair, timesteps=(100, 300, 500, 700, 900), n_eps: int = 1,
                       eval_seed: int = 1234) -> LossCurves:
    """Run an exact-gradient and an SDS attack and track the semantic loss on
    a fixed (t, eps) grid after every iteration.

    Divergence is ``max_i |L_sds(i) - L_full(i)| / L_full(i)`` on the
    batch-mean traces. Seconds per iteration are medians of the per-iteration
    gradient times, so the instrumented first step and scheduler hiccups do
    not skew the comparison.
    """
    a, b = cfg_pair
    fa, fb = a.to_dict(), b.to_dict()
    for k in ("use_sds", "method"):
        fa.pop(k), fb.pop(k)
    if fa != fb or a.use_sds == b.use_sds:
        raise ValueError("config pair must differ only in use_sds")
    full_cfg, sds_cfg = (a, b) if not a.use_sds else (b, a)
    x = _batch(x)

    def run(cfg):
        trace = []
        res = pgd_protect(x, bundle, cfg,
                          callback=lambda i, xi: trace.append(fixed_noise_loss(xi, bundle, timesteps, n_eps, eval_seed)))
        sec = float(np.median(res.iter_seconds)) if len(res.iter_seconds) else 0.0
        return np.stack(trace), sec

    tf, sf = run(full_cfg)
    ts, ss = run(sds_cfg)
    mf, ms = tf.mean(1), ts.mean(1)
    div = float(np.max(np.abs(ms - mf) / mf))
    return LossCurves(mf, ms, div, sf, ss, {"full": tf, "sds": ts})


@torch.no_grad()
def protection_score(x, x_adv, bundle, strength: float = DEFAULT_STRENGTH, seed: int = 0,
                     metric_bundle=None) -> np.ndarray:
    """``1 - similarity(SDEdit(x_adv), SDEdit(x))`` under the same edit noise."""
    x, x_adv = _batch(x), _batch(x_adv)
    ea = sdedit(x_adv, bundle, strength, seed=seed)
    ec = sdedit(x, bundle, strength, seed=seed)
    return 1.0 - similarity(ea, ec, metric_bundle or bundle)


def transfer_probe(x, x_adv, bundle_a, bundle_b, strength: float = DEFAULT_STRENGTH, seed: int = 0) -> dict:
    """Protection score of perturbations crafted on A, evaluated natively on A
    and transferred to B (each scored with its own encoder features)."""
    if bundle_a.image_size != bundle_b.image_size:
        raise ValueError(f"resolution mismatch: {bundle_a.image_size} vs {bundle_b.image_size}")
    native = protection_score(x, x_adv, bundle_a, strength, seed)
    transfer = protection_score(x, x_adv, bundle_b, strength, seed)
    return {"native": float(native.mean()), "transfer": float(transfer.mean()),
            "retention": float(transfer.mean() / native.mean()) if native.mean() > 0 else float("nan"),
            "native_per_image": native, "transfer_per_image": transfer}


def pixel_dm_attack_probe(pixel_bundle, x, budget: float = 16 / 255, iters: int = 100,
                          strength: float = DEFAULT_STRENGTH, seed: int = 0, metric_bundle=None,
                          step: float = 1 / 255) -> dict:
    """AdvDM-style PGD directly against a pixel-space diffusion model.

    ``similarity`` compares the edit of the attacked image with the edit of
    the clean image (same noise); ``clean_similarity`` compares two edits of
    the clean image under different noise, the edit's own variability.
    """
    if metric_bundle is None:
        raise ValueError("pixel probe needs a metric bundle with an encoder")
    x = _batch(x)
    ref = sdedit(x, pixel_bundle, strength, seed=seed + REFERENCE_SEED_OFFSET)
    clean_edit = sdedit(x, pixel_bundle, strength, seed=seed)
    if budget > 0 and iters > 0:
        cfg = make_method("advdm", budget=budget, step=step, iters=iters, seed=seed)
        x_adv = pgd_protect(x, pixel_bundle, cfg).x_adv
    else:
        x_adv = x.clone()
    adv_edit = sdedit(x_adv, pixel_bundle, strength, seed=seed)
    sim = similarity(adv_edit, clean_edit, metric_bundle)
    clean_sim = similarity(clean_edit, ref, metric_bundle)
    adv_ref_sim = similarity(adv_edit, ref, metric_bundle)
    return {"similarity": float(sim.mean()), "clean_similarity": float(clean_sim.mean()),
            "attacked_vs_reference": float(adv_ref_sim.mean()),
            "linf": float((x_adv - x).abs().max()), "n": int(x.shape[0])}
