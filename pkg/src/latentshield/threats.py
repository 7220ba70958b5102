"""Mimicry pipelines a protection has to withstand: SDEdit, mask inpainting by
latent blending, condition-embedding inversion and plain generation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import ddim_sample, q_sample

EDIT_KINDS = ("sdedit", "inpaint", "embed_invert")
DEFAULT_FULL_STEPS = 50


class EditError(ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    pass


class InversionDivergedError(FloatingPointError):
    def __init__(self, iteration, trace):
        super().__init__(f"embedding inversion diverged at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass
class EditRequest:
    kind: str = "sdedit"
    strength: Optional[float] = 0.3
    mask: Optional[np.ndarray] = None
    cond: Optional[object] = None
    steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise EditError(f"unknown edit kind {self.kind!r}")
        if self.kind == "sdedit":
            if self.strength is None:
                raise EditError("sdedit requires a strength")
            _check_strength(self.strength)
        if self.kind == "inpaint" and self.mask is None:
            raise EditError("inpaint requires a mask")


def _check_strength(strength):
    if not 0.0 < strength <= 1.0:
        raise EditError(f"strength must lie in (0, 1], got {strength}")


def start_timestep(strength: float, T: int) -> int:
    """Noising depth for an edit strength: round(strength * T), kept in [1, T-1]."""
    _check_strength(strength)
    return int(min(max(round(strength * T), 1), T - 1))


def _batched(x):
    return (x[None], True) if x.dim() == 3 else (x, False)


@torch.no_grad()
def sdedit(x: torch.Tensor, bundle, strength: float, steps: Optional[int] = None,
           cond=None, seed: int = 0) -> torch.Tensor:
    """Noise the encoding of ``x`` to depth ``strength`` and DDIM-denoise it back.

    ``steps`` defaults to ``round(50 * strength)`` reverse steps.
    """
    t_star = start_timestep(strength, bundle.schedule.T)
    if steps is None:
        steps = max(1, round(DEFAULT_FULL_STEPS * strength))
    x, single = _batched(x)
    gen = torch.Generator().manual_seed(seed)
    z0 = bundle.to_diffusion(x)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = q_sample(z0, t_star, eps, bundle.schedule).z_t
    z = ddim_sample(bundle.denoiser, z_t, steps, cond=cond, schedule=bundle.schedule,
                    t_start=t_star, generator=gen)
    out = bundle.from_diffusion(z)
    return out[0] if single else out


def latent_mask(mask, bundle, like: torch.Tensor) -> torch.Tensor:
    """Pixel mask (1 = region to synthesize) -> diffusion-space mask. A latent
    cell counts as unknown if any pixel it covers is masked."""
    m = torch.as_tensor(np.asarray(mask), dtype=like.dtype)
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m[:, None]
    if not torch.all((m == 0) | (m == 1)):
        raise EditError("mask must be binary")
    size = like.shape[-1]
    if getattr(bundle, "encoder", None) is not None:
        d = bundle.downsample
        if m.shape[-1] != size * d or m.shape[-2] != like.shape[-2] * d:
            raise EditError(f"mask size {tuple(m.shape[-2:])} does not match image size")
        m = F.max_pool2d(m, d)
    elif tuple(m.shape[-2:]) != tuple(like.shape[-2:]):
        raise EditError(f"mask size {tuple(m.shape[-2:])} does not match image size")
    return m


@torch.no_grad()
def inpaint(x: torch.Tensor, mask, bundle, cond=None, steps: int = DEFAULT_FULL_STEPS,
            seed: int = 0) -> torch.Tensor:
    """Synthesize the masked region; after every reverse step the known region
    is reset to the forward-noised encoding of ``x`` at the new timestep.

    An all-zero mask emits ``EmptyMaskWarning`` and returns the reconstruction.
    """
    x, single = _batched(x)
    m = latent_mask(mask, bundle, bundle.to_diffusion(x[:1]))
    if float(m.sum()) == 0:
        warnings.warn("empty inpainting mask; returning reconstruction", EmptyMaskWarning)
        out = bundle.reconstruct(x)
        return out[0] if single else out
    gen = torch.Generator().manual_seed(seed)
    z0 = bundle.to_diffusion(x)
    m = m.expand(z0.shape[0], 1, *z0.shape[-2:])
    noise_known = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_T = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    T = bundle.schedule.T

    def known(z, t_next):
        truth = z0 if t_next < 0 else q_sample(z0, t_next, noise_known, bundle.schedule).z_t
        return m * z + (1 - m) * truth

    z = known(z_T, T - 1)
    z = ddim_sample(bundle.denoiser, z, steps, cond=cond, schedule=bundle.schedule,
                    generator=gen, known=known)
    out = bundle.from_diffusion(z)
    return out[0] if single else out


def null_embedding(bundle) -> torch.Tensor:
    emb = bundle.denoiser.embed
    return emb.classes.weight[emb.num_classes].detach().clone()


def class_embedding(bundle, c: int) -> torch.Tensor:
    return bundle.denoiser.embed.classes.weight[c].detach().clone()


def invert_embedding(images, bundle, iters: int = 2000, lr: float = 5e-4, seed: int = 0,
                     batch_size: int = 32, init: Optional[torch.Tensor] = None,
                     return_trace: bool = False):
    """Learn one condition vector that makes the frozen denoiser fit ``images``.

    The vector starts at the null-condition embedding (or ``init``) and is
    optimized with Adam on the noise-prediction loss.
    """
    x = torch.stack(list(images)) if not torch.is_tensor(images) else images
    if x.dim() != 4 or x.shape[0] < 3:
        raise EditError("embedding inversion needs at least 3 images")
    with torch.no_grad():
        z0 = bundle.to_diffusion(x)
    vec = (null_embedding(bundle) if init is None else init.detach().clone()).requires_grad_(True)
    opt = torch.optim.Adam([vec], lr=lr)
    gen = torch.Generator().manual_seed(seed)
    trace = []
    n = z0.shape[0]
    for i in range(iters):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        zb = z0[idx]
        t = torch.randint(0, bundle.schedule.T, (zb.shape[0],), generator=gen)
        eps = torch.randn(zb.shape, generator=gen, dtype=zb.dtype)
        with torch.enable_grad():
            z_t = q_sample(zb, t, eps, bundle.schedule).z_t
            loss = ((bundle.denoiser(z_t, t, vec) - eps) ** 2).mean()
            opt.zero_grad()
            loss.backward()
        trace.append(loss.item())
        if not (np.isfinite(trace[-1]) and torch.isfinite(vec.grad).all()):
            raise InversionDivergedError(i, trace)
        opt.step()
    vec = vec.detach()
    return (vec, trace) if return_trace else vec


@torch.no_grad()
def generate(bundle, cond=None, count: int = 1, seed: int = 0,
             steps: int = DEFAULT_FULL_STEPS, batch_size: int = 256) -> list:
    """Sample ``count`` images with deterministic DDIM from seeded Gaussian noise."""
    if count <= 0:
        return []
    gen = torch.Generator().manual_seed(seed)
    if getattr(bundle, "encoder", None) is not None:
        shape = bundle.latent_shape()
    else:
        shape = (bundle.denoiser.arch["channels"], bundle.image_size, bundle.image_size)
    out = []
    for start in range(0, count, batch_size):
        b = min(batch_size, count - start)
        z_T = torch.randn((b,) + tuple(shape), generator=gen)
        z = ddim_sample(bundle.denoiser, z_T, steps, cond=cond, schedule=bundle.schedule)
        out.extend(bundle.from_diffusion(z).unbind(0))
    return out


def run_edit(request: EditRequest, x: torch.Tensor, bundle):
    """Dispatch an ``EditRequest``. For ``embed_invert`` ``x`` is the image set
    and the learned embedding is returned."""
    if request.kind == "sdedit":
        return sdedit(x, bundle, request.strength, request.steps, request.cond, request.seed)
    if request.kind == "inpaint":
        return inpaint(x, request.mask, bundle, request.cond,
                       request.steps or DEFAULT_FULL_STEPS, request.seed)
    return invert_embedding(x, bundle, seed=request.seed)
