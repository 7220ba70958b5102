"""Desk-scale network architectures: a deterministic conv autoencoder, a
latent noise predictor and a small pixel-space UNet.

Every module is built from an ``arch`` dict so checkpoints can rebuild it.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Encoder(nn.Module):
    """Image in [0, 1] -> latent, spatial downsample by ``2 ** n_down``."""

    def __init__(self, in_channels=3, latent_channels=4, width=16, n_down=2):
        super().__init__()
        self.arch = dict(in_channels=in_channels, latent_channels=latent_channels,
                         width=width, n_down=n_down)
        layers = [nn.Conv2d(in_channels, width, 3, padding=1), nn.SiLU()]
        ch = width
        for i in range(n_down):
            out = width * 2 if i == 0 else ch
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.SiLU()]
            ch = out
        layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(),
                   nn.Conv2d(ch, latent_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    @property
    def downsample(self) -> int:
        return 2 ** self.arch["n_down"]

    def forward(self, x):
        return self.net(x * 2 - 1)


class Decoder(nn.Module):
    """Latent -> image. Output is unclamped; callers clamp to [0, 1]."""

    def __init__(self, out_channels=3, latent_channels=4, width=32, n_down=2):
        super().__init__()
        self.arch = dict(out_channels=out_channels, latent_channels=latent_channels,
                         width=width, n_down=n_down)
        ch = width * 2 if n_down else width
        layers = [nn.Conv2d(latent_channels, ch, 3, padding=1), nn.SiLU(),
                  nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        for i in range(n_down):
            out = width if i == n_down - 1 else ch
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch, out, 3, padding=1), nn.SiLU()]
            ch = out
        layers += [nn.Conv2d(ch, out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z) + 0.5


class ResBlock(nn.Module):
    def __init__(self, ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, h, emb):
        r = self.conv1(F.silu(self.norm1(h)))
        r = r + self.emb(emb)[:, :, None, None]
        r = self.conv2(F.silu(self.norm2(r)))
        return h + r


class CondEmbedding(nn.Module):
    """Timestep + class-condition embedding.

    ``cond`` may be None (null condition), a LongTensor of class ids, or a
    float tensor of learned embedding vectors, shape (emb_dim,) or (B, emb_dim).
    """

    def __init__(self, base, emb_dim, num_classes):
        super().__init__()
        self.base = base
        self.num_classes = num_classes
        self.time_mlp = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        # last row is the null / unconditional class
        self.classes = nn.Embedding(num_classes + 1, emb_dim)

    def cond_vector(self, cond, batch, like):
        if cond is None:
            idx = torch.full((batch,), self.num_classes, dtype=torch.long, device=like.device)
            return self.classes(idx)
        if isinstance(cond, int):
            cond = torch.full((batch,), cond, dtype=torch.long, device=like.device)
        if not torch.is_floating_point(cond):
            cond = torch.as_tensor(cond, dtype=torch.long)
            if cond.dim() == 0:
                cond = cond.expand(batch)
            return self.classes(cond)
        if cond.dim() == 1:
            cond = cond.expand(batch, -1)
        return cond.to(like.dtype)

    def forward(self, t, cond, like):
        temb = timestep_embedding(t, self.base).to(like.dtype)
        return self.time_mlp(temb) + self.cond_vector(cond, t.shape[0], like)


class Denoiser(nn.Module):
    """Residual conv noise predictor on latents. Output head is zero-initialized."""

    def __init__(self, channels=4, width=64, depth=4, emb_dim=128, num_classes=4):
        super().__init__()
        self.arch = dict(channels=channels, width=width, depth=depth, emb_dim=emb_dim,
                         num_classes=num_classes)
        self.embed = CondEmbedding(width, emb_dim, num_classes)
        self.inp = nn.Conv2d(channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(width, emb_dim) for _ in range(depth))
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def emb_dim(self) -> int:
        return self.arch["emb_dim"]

    def forward(self, z, t, cond=None):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        emb = self.embed(t, cond, z)
        h = self.inp(z)
        for blk in self.blocks:
            h = blk(h, emb)
        return self.out(F.silu(self.out_norm(h)))


class PixelUNet(nn.Module):
    """Two-level UNet noise predictor operating directly on images."""

    def __init__(self, channels=3, width=32, emb_dim=128, num_classes=4):
        super().__init__()
        self.arch = dict(channels=channels, width=width, emb_dim=emb_dim, num_classes=num_classes)
        w2 = width * 2
        self.embed = CondEmbedding(width, emb_dim, num_classes)
        self.inp = nn.Conv2d(channels, width, 3, padding=1)
        self.enc1 = ResBlock(width, emb_dim)
        self.down1 = nn.Conv2d(width, w2, 4, stride=2, padding=1)
        self.enc2 = ResBlock(w2, emb_dim)
        self.down2 = nn.Conv2d(w2, w2, 4, stride=2, padding=1)
        self.mid1 = ResBlock(w2, emb_dim)
        self.mid2 = ResBlock(w2, emb_dim)
        self.up2 = nn.Conv2d(w2 * 2, w2, 3, padding=1)
        self.dec2 = ResBlock(w2, emb_dim)
        self.up1 = nn.Conv2d(w2 + width, width, 3, padding=1)
        self.dec1 = ResBlock(width, emb_dim)
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def emb_dim(self) -> int:
        return self.arch["emb_dim"]

    def forward(self, x, t, cond=None):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = self.embed(t, cond, x)
        h1 = self.enc1(self.inp(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h = self.mid2(self.mid1(self.down2(h2), emb), emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec2(self.up2(torch.cat([h, h2], 1)), emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec1(self.up1(torch.cat([h, h1], 1)), emb)
        return self.out(F.silu(self.out_norm(h)))


ARCHS = {"Encoder": Encoder, "Decoder": Decoder, "Denoiser": Denoiser, "PixelUNet": PixelUNet}


def build(kind: str, arch: dict) -> nn.Module:
    return ARCHS[kind](**arch)


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
