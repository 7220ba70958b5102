"""Noise schedules, closed-form forward noising, the noise-prediction loss and
DDIM reverse sampling.

Everything here is a pure function of its inputs. Randomness only enters
through an explicit ``torch.Generator`` owned by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward diffusion coefficients. Arrays are float64 numpy, length T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def alpha_bar(self, t, like: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Gather alpha_bar at integer timesteps ``t`` (int or LongTensor)."""
        ab = torch.as_tensor(self.alpha_bars)
        if like is not None:
            ab = ab.to(dtype=like.dtype, device=like.device)
        else:
            ab = ab.to(torch.float32)
        return ab[torch.as_tensor(t, device=ab.device, dtype=torch.long)]

    def descriptor(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": float(self.beta_start),
            "beta_end": float(self.beta_end),
        }


def make_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a schedule. ``kind`` is ``linear`` (DDPM) or ``cosine``.

    For the cosine schedule ``beta_start``/``beta_end`` only clip the betas.
    """
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = 1 - f[1:] / f[:-1]
        betas = np.clip(betas, beta_start, 0.999)
        betas = np.maximum.accumulate(betas)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, kind=kind,
                         beta_start=float(beta_start), beta_end=float(beta_end))


def check_schedule(schedule: NoiseSchedule) -> None:
    """Raise ScheduleError unless every schedule invariant holds."""
    b = schedule.betas
    if len(b) != schedule.T:
        raise ScheduleError("betas length != T")
    if not np.all((b > 0) & (b < 1)):
        raise ScheduleError("betas must lie in (0, 1)")
    if np.any(np.diff(b) < 0):
        raise ScheduleError("betas must be nondecreasing")
    if not np.array_equal(schedule.alphas, 1.0 - b):
        raise ScheduleError("alphas != 1 - betas")
    if not np.array_equal(schedule.alpha_bars, np.cumprod(schedule.alphas)):
        raise ScheduleError("alpha_bars != cumprod(alphas)")
    if np.any(np.diff(schedule.alpha_bars) >= 0):
        raise ScheduleError("alpha_bars must be strictly decreasing")
    if schedule.alpha_bars[-1] >= 0.05:
        raise ScheduleError(f"alpha_bars[T-1]={schedule.alpha_bars[-1]:.4f} >= 0.05")


@dataclass
class NoisySample:
    z_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


def _check_t(t, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
        raise IndexError(f"timestep out of range [0, {schedule.T}): {t.tolist()}")
    return t


def _bcast(coef: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    # per-sample coefficients (B,) broadcast over (B, ...)
    if coef.dim() == 0:
        return coef
    return coef.reshape(coef.shape[0], *([1] * (z.dim() - 1)))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> NoisySample:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or a (B,) tensor of per-sample timesteps.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    t = _check_t(t, schedule)
    ab = _bcast(schedule.alpha_bar(t, like=z0), z0)
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    return NoisySample(z_t=z_t, t=t, eps=eps)


def _as_batch_t(t: torch.Tensor, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(batch)
    return t


def denoiser_loss(denoiser, z0: torch.Tensor, t, eps: torch.Tensor, cond=None,
                  schedule: Optional[NoiseSchedule] = None, reduce: bool = True) -> torch.Tensor:
    """Mean squared noise-prediction error at timestep(s) ``t``.

    With ``reduce=False`` returns one value per sample, averaged over that
    sample's elements.
    """
    if schedule is None:
        schedule = denoiser.schedule
    ns = q_sample(z0, t, eps, schedule)
    pred = denoiser(ns.z_t, _as_batch_t(ns.t, z0.shape[0]), cond)
    err = (pred - eps) ** 2
    per_sample = err.flatten(1).mean(1)
    return per_sample.mean() if reduce else per_sample


def ddim_timesteps(T: int, steps: int, t_start: Optional[int] = None) -> np.ndarray:
    """Evenly spaced descending timesteps from ``t_start`` (default T-1) to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    t_start = T - 1 if t_start is None else int(t_start)
    if not 0 <= t_start < T:
        raise IndexError(f"t_start {t_start} out of range")
    steps = min(steps, t_start + 1)
    ts = np.unique(np.round(np.linspace(0, t_start, steps)).astype(np.int64))[::-1]
    return ts.copy()


@torch.no_grad()
def ddim_sample(denoiser, z_T: torch.Tensor, steps: int, eta: float = 0.0, cond=None,
                schedule: Optional[NoiseSchedule] = None, t_start: Optional[int] = None,
                generator: Optional[torch.Generator] = None, known=None) -> torch.Tensor:
    """Reverse-sample from ``z_T`` (a latent at timestep ``t_start``) to z_0.

    ``eta=0`` is the deterministic DDIM sampler; ``eta=1`` matches DDPM
    ancestral variance. ``known`` is an optional callback
    ``known(z, t_next) -> z`` applied after every step (used for inpainting).
    """
    if schedule is None:
        schedule = denoiser.schedule
    if steps > schedule.T:
        raise ValueError(f"steps={steps} exceeds T={schedule.T}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    ts = ddim_timesteps(schedule.T, steps, t_start)
    z = z_T
    B = z.shape[0]
    for i, t in enumerate(ts):
        t_next = int(ts[i + 1]) if i + 1 < len(ts) else -1
        ab = float(schedule.alpha_bars[t])
        ab_next = float(schedule.alpha_bars[t_next]) if t_next >= 0 else 1.0
        eps_hat = denoiser(z, torch.full((B,), int(t), dtype=torch.long), cond)
        x0_hat = (z - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
        sigma = eta * math.sqrt((1 - ab_next) / (1 - ab) * (1 - ab / ab_next)) if t_next >= 0 else 0.0
        dir_coef = math.sqrt(max(1 - ab_next - sigma ** 2, 0.0))
        z = math.sqrt(ab_next) * x0_hat + dir_coef * eps_hat
        if sigma > 0:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
            z = z + sigma * noise
        if known is not None:
            z = known(z, t_next)
    return z

