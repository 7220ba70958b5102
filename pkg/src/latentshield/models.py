"""Model bundles and their training loops.

An :class:`LdmBundle` ties a deterministic autoencoder to a latent noise
predictor. The denoiser never sees raw encoder outputs: latents are
standardized per channel with statistics of the encoded training set (the
same role as the fixed latent scale factor of large latent diffusion
models). A :class:`PixelDmBundle` exposes the same diffusion-facing
interface for a model that denoises images directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageSet
from .diffusion import NoiseSchedule, denoiser_loss, make_schedule
from .nets import Decoder, Denoiser, Encoder, PixelUNet

log = logging.getLogger(__name__)

MIN_AE_IMAGES = 512
MIN_STATS_IMAGES = 256


class TrainingError(RuntimeError):
    """Training failed; ``history`` holds the per-epoch record."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


class InsufficientDataError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


def config_hash(cfg) -> str:
    d = asdict(cfg) if not isinstance(cfg, dict) else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _seeded(seed: int, fn, *args, **kwargs):
    # build modules under a private RNG state so global torch RNG is untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn(*args, **kwargs)


def _freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@dataclass
class LatentStats:
    mean: torch.Tensor  # (C,)
    std: torch.Tensor   # (C,)
    count: int

    def to(self, dtype):
        return LatentStats(self.mean.to(dtype), self.std.to(dtype), self.count)


def compute_latent_stats(encoder, images: np.ndarray, batch_size: int = 256) -> LatentStats:
    if len(images) < MIN_STATS_IMAGES:
        raise InsufficientDataError(
            f"latent statistics need >= {MIN_STATS_IMAGES} images, got {len(images)}")
    zs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            zs.append(encoder(torch.from_numpy(images[i:i + batch_size])).double())
    z = torch.cat(zs)
    mean = z.mean(dim=(0, 2, 3))
    std = z.std(dim=(0, 2, 3))
    if torch.any(std <= 0):
        # degenerate data (e.g. constant images) still needs an invertible map
        std = torch.where(std > 0, std, torch.ones_like(std))
    return LatentStats(mean.float(), std.float(), len(images))


def normalize_latent(z: torch.Tensor, stats: LatentStats) -> torch.Tensor:
    if torch.any(stats.std <= 0):
        raise ValueError("latent std must be positive")
    m = stats.mean.to(z.dtype)[:, None, None]
    s = stats.std.to(z.dtype)[:, None, None]
    return (z - m) / s


def denormalize_latent(zn: torch.Tensor, stats: LatentStats) -> torch.Tensor:
    m = stats.mean.to(zn.dtype)[:, None, None]
    s = stats.std.to(zn.dtype)[:, None, None]
    return zn * s + m


class LdmBundle:
    """Encoder, decoder, denoiser, schedule and latent statistics."""

    kind = "ldm"

    def __init__(self, encoder, decoder, denoiser, schedule: NoiseSchedule,
                 latent_stats: LatentStats, meta: Optional[dict] = None):
        self.encoder = encoder
        self.decoder = decoder
        self.denoiser = denoiser
        self.schedule = schedule
        self.latent_stats = latent_stats
        self.meta = dict(meta or {})

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("trained", False))

    @property
    def image_size(self) -> Optional[int]:
        return self.meta.get("image_size")

    @property
    def downsample(self) -> int:
        return self.encoder.downsample

    @property
    def dtype(self):
        return next(self.encoder.parameters()).dtype

    def freeze(self):
        for m in (self.encoder, self.decoder, self.denoiser):
            _freeze(m)
        return self

    def to(self, dtype):
        for m in (self.encoder, self.decoder, self.denoiser):
            m.to(dtype)
        self.latent_stats = self.latent_stats.to(dtype)
        return self

    def _check(self, x):
        if x.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) images, got {tuple(x.shape)}")
        size = self.image_size
        if size is not None and tuple(x.shape[-2:]) != (size, size):
            raise ResolutionError(f"bundle trained at {size}x{size}, got {tuple(x.shape[-2:])}")
        if x.shape[1] != self.encoder.arch["in_channels"]:
            raise ResolutionError(f"expected {self.encoder.arch['in_channels']} channels")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z).clamp(0, 1)

    def normalize(self, z):
        return normalize_latent(z, self.latent_stats)

    def denormalize(self, zn):
        return denormalize_latent(zn, self.latent_stats)

    # diffusion-facing interface shared with PixelDmBundle
    def to_diffusion(self, x: torch.Tensor) -> torch.Tensor:
        return self.normalize(self.encode(x))

    def from_diffusion(self, zn: torch.Tensor) -> torch.Tensor:
        return self.decode(self.denormalize(zn))

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def latent_shape(self, size=None):
        size = size or self.image_size
        d = self.downsample
        return (self.encoder.arch["latent_channels"], size // d, size // d)

    def modules(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder, "denoiser": self.denoiser}


class PixelDmBundle:
    """Diffusion directly on images mapped to [-1, 1]; no autoencoder."""

    kind = "pixel"

    def __init__(self, denoiser, schedule: NoiseSchedule, meta: Optional[dict] = None):
        self.denoiser = denoiser
        self.schedule = schedule
        self.meta = dict(meta or {})

    encoder = None
    decoder = None

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("trained", False))

    @property
    def image_size(self):
        return self.meta.get("image_size")

    def freeze(self):
        _freeze(self.denoiser)
        return self

    def to_diffusion(self, x):
        size = self.image_size
        if size is not None and tuple(x.shape[-2:]) != (size, size):
            raise ResolutionError(f"bundle trained at {size}x{size}, got {tuple(x.shape[-2:])}")
        return x * 2 - 1

    def from_diffusion(self, z):
        return ((z + 1) / 2).clamp(0, 1)

    def reconstruct(self, x):
        return x

    def modules(self) -> dict:
        return {"denoiser": self.denoiser}


# -- training -----------------------------------------------------------------

@dataclass
class AutoencoderConfig:
    latent_channels: int = 4
    width: int = 16
    decoder_width: int = 32
    n_down: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 30
    rmse_threshold: float = 0.08
    heldout_frac: float = 0.1
    seed: int = 0


@dataclass
class DenoiserConfig:
    width: int = 64
    depth: int = 6
    emb_dim: int = 128
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 60
    cond_dropout: float = 0.1
    val_frac: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"


@dataclass
class PixelDmConfig:
    width: int = 32
    emb_dim: int = 128
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 40
    cond_dropout: float = 0.1
    val_frac: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"


@dataclass
class AutoencoderResult:
    encoder: Encoder
    decoder: Decoder
    latent_stats: LatentStats
    history: list = field(default_factory=list)
    heldout_rmse: float = float("nan")


def _split(n, frac, rng):
    idx = rng.permutation(n)
    k = max(1, int(round(n * frac)))
    return np.sort(idx[k:]), np.sort(idx[:k])


def _rmse(decoder, encoder, images, batch=256) -> float:
    se, cnt = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(images[i:i + batch])
            r = decoder(encoder(x)).clamp(0, 1)
            se += float(((r - x) ** 2).sum())
            cnt += x.numel()
    return math.sqrt(se / max(cnt, 1))


def _lr_at(step, total, base, warmup=100):
    # short runs get a proportionally short warmup
    warmup = max(1, min(warmup, total // 5))
    if step < warmup:
        return base * (step + 1) / warmup
    p = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1 + math.cos(math.pi * min(p, 1.0)))


def train_autoencoder(dataset: ImageSet, cfg: AutoencoderConfig = AutoencoderConfig()) -> AutoencoderResult:
    """Train the deterministic autoencoder with plain pixel MSE.

    Raises TrainingError (with history) if held-out RMSE never reaches
    ``cfg.rmse_threshold`` within ``cfg.max_epochs``.
    """
    n = len(dataset)
    if n < MIN_AE_IMAGES:
        raise InsufficientDataError(f"autoencoder training needs >= {MIN_AE_IMAGES} images, got {n}")
    rng = np.random.default_rng(cfg.seed)
    tr_idx, ho_idx = _split(n, cfg.heldout_frac, rng)
    train_x, held_x = dataset.images[tr_idx], dataset.images[ho_idx]
    C = dataset.images.shape[1]
    enc = _seeded(cfg.seed, Encoder, C, cfg.latent_channels, cfg.width, cfg.n_down)
    dec = _seeded(cfg.seed + 1, Decoder, C, cfg.latent_channels, cfg.decoder_width, cfg.n_down)
    params = list(enc.parameters()) + list(dec.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    steps_per_epoch = max(1, len(train_x) // cfg.batch_size)
    total = steps_per_epoch * cfg.max_epochs
    history, step = [], 0
    rmse = float("nan")
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_x))
        run = 0.0
        for b in range(steps_per_epoch):
            x = torch.from_numpy(train_x[order[b * cfg.batch_size:(b + 1) * cfg.batch_size]])
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, cfg.lr)
            loss = F.mse_loss(dec(enc(x)), x)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            run += loss.item()
        if not math.isfinite(run):
            raise TrainingError(f"autoencoder loss diverged at epoch {epoch}", history)
        rmse = _rmse(dec, enc, held_x)
        history.append({"epoch": epoch, "train_mse": run / steps_per_epoch, "heldout_rmse": rmse})
        log.info("ae epoch %d mse %.5f heldout rmse %.4f", epoch, run / steps_per_epoch, rmse)
    if not rmse <= cfg.rmse_threshold:
        raise TrainingError(
            f"held-out RMSE {rmse:.4f} above threshold {cfg.rmse_threshold}", history)
    _freeze(enc)
    _freeze(dec)
    stats = compute_latent_stats(enc, train_x)
    return AutoencoderResult(enc, dec, stats, history, rmse)


def _train_noise_model(model, data: torch.Tensor, labels: torch.Tensor, schedule, cfg, tag):
    """Shared epsilon-prediction loop. ``data`` is already in diffusion space."""
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(data)
    tr_idx, va_idx = _split(n, cfg.val_frac, rng)
    tr, tr_lab = data[tr_idx], labels[tr_idx]
    va = data[va_idx]
    # fixed validation grid of (t, eps) so epochs are comparable
    vgen = torch.Generator().manual_seed(cfg.seed + 7919)
    va_t = torch.randint(0, schedule.T, (len(va),), generator=vgen)
    va_eps = torch.randn(va.shape, generator=vgen)

    def validate():
        with torch.no_grad():
            return float(denoiser_loss(model, va, va_t, va_eps, None, schedule))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps_per_epoch = max(1, len(tr) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    history = [{"epoch": -1, "train_loss": float("nan"), "val_loss": validate()}]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr))
        run = 0.0
        for b in range(steps_per_epoch):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            z0, lab = tr[sel], tr_lab[sel].clone()
            drop = torch.rand(len(sel), generator=gen) < cfg.cond_dropout
            lab[drop] = model.arch["num_classes"]
            t = torch.randint(0, schedule.T, (len(sel),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, cfg.lr)
            loss = denoiser_loss(model, z0, t, eps, lab, schedule)
            if not torch.isfinite(loss):
                raise TrainingError(f"{tag} loss is NaN at epoch {epoch} step {b}", history)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            run += loss.item()
        val = validate()
        history.append({"epoch": epoch, "train_loss": run / steps_per_epoch, "val_loss": val})
        log.info("%s epoch %d train %.4f val %.4f", tag, epoch, run / steps_per_epoch, val)
    _freeze(model)
    return history


@dataclass
class DenoiserResult:
    denoiser: Denoiser
    schedule: NoiseSchedule
    history: list


def encode_dataset(encoder, stats: LatentStats, images: np.ndarray, batch=256) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(normalize_latent(encoder(torch.from_numpy(images[i:i + batch])), stats))
    return torch.cat(out)


def train_denoiser(dataset: ImageSet, encoder, latent_stats: LatentStats,
                   cfg: DenoiserConfig = DenoiserConfig(), num_classes: int = 4) -> DenoiserResult:
    if encoder is None:
        raise ValueError("train_denoiser needs a trained encoder")
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule)
    z = encode_dataset(encoder, latent_stats, dataset.images)
    model = _seeded(cfg.seed, Denoiser, z.shape[1], cfg.width, cfg.depth, cfg.emb_dim, num_classes)
    history = _train_noise_model(model, z, torch.from_numpy(dataset.labels), schedule, cfg, "denoiser")
    return DenoiserResult(model, schedule, history)


def train_ldm(dataset: ImageSet, ae_cfg: AutoencoderConfig = AutoencoderConfig(),
              dn_cfg: DenoiserConfig = DenoiserConfig(), num_classes: int = 4) -> LdmBundle:
    """Train autoencoder then denoiser; returns a frozen, trained bundle."""
    ae = train_autoencoder(dataset, ae_cfg)
    dn = train_denoiser(dataset, ae.encoder, ae.latent_stats, dn_cfg, num_classes)
    meta = {
        "trained": True,
        "image_size": int(dataset.images.shape[-1]),
        "dataset_hash": dataset.content_hash(),
        "autoencoder_config": asdict(ae_cfg),
        "denoiser_config": asdict(dn_cfg),
        "config_hash": config_hash({"ae": asdict(ae_cfg), "dn": asdict(dn_cfg)}),
        "heldout_rmse": ae.heldout_rmse,
        "ae_history": ae.history,
        "denoiser_history": dn.history,
        "final_val_loss": dn.history[-1]["val_loss"],
        "num_classes": num_classes,
    }
    return LdmBundle(ae.encoder, ae.decoder, dn.denoiser, dn.schedule, ae.latent_stats, meta).freeze()


def train_pixel_dm(dataset: ImageSet, cfg: PixelDmConfig = PixelDmConfig(),
                   num_classes: int = 4) -> PixelDmBundle:
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule)
    x = torch.from_numpy(dataset.images) * 2 - 1
    model = _seeded(cfg.seed, PixelUNet, x.shape[1], cfg.width, cfg.emb_dim, num_classes)
    history = _train_noise_model(model, x, torch.from_numpy(dataset.labels), schedule, cfg, "pixel-dm")
    meta = {
        "trained": True,
        "image_size": int(dataset.images.shape[-1]),
        "dataset_hash": dataset.content_hash(),
        "pixel_dm_config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "denoiser_history": history,
        "final_val_loss": history[-1]["val_loss"],
        "num_classes": num_classes,
    }
    return PixelDmBundle(model, schedule, meta).freeze()
