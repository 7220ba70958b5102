"""Protection engine: semantic and textural losses, exact and SDS gradients,
the l-inf PGD loop, the direct latent-space attack and the method registry.

Images are batched tensors (B, C, H, W) in [0, 1]. Each image in a batch is
an independent attack; per-sample losses are summed before differentiating,
so every image receives exactly the gradient it would get on its own.

Gradient scale conventions
--------------------------
``semantic_loss`` is the per-sample *mean* squared noise-prediction error
over the N latent elements. ``sds_gradient`` is the literal score
distillation estimate ``(eps_hat - eps) * dz_t/dx`` with no reduction
factor. For a denoiser whose Jacobian is the identity the two are related
by ``full_semantic_gradient == (2 / N) * sds_gradient``. The PGD loop
rescales the SDS estimate by ``2 / N`` before mixing it with the textural
gradient so that ``textural_weight`` means the same thing for every method.
"""

from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import save_array, save_png, target_pattern
from .diffusion import q_sample

METHODS = ("advdm", "advdm_minus", "photoguard", "mist", "sds_plus", "sds_minus", "sdst")

# method -> (use_semantic, use_textural, use_sds, semantic direction)
METHOD_TABLE = {
    "advdm": (True, False, False, "ascent"),
    "advdm_minus": (True, False, False, "descent"),
    "photoguard": (False, True, False, "ascent"),
    "mist": (True, True, False, "ascent"),
    "sds_plus": (True, False, True, "ascent"),
    "sds_minus": (True, False, True, "descent"),
    "sdst": (True, True, True, "descent"),
}

DEFAULT_TEXTURAL_WEIGHT = {"photoguard": 1.0, "mist": 1.0, "sdst": 1.0}


class AttackConfigError(ValueError):
    pass


class MissingTargetError(AttackConfigError):
    pass


class AttackDivergedError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "gradient"):
        super().__init__(f"non-finite {what} at PGD iteration {iteration}")
        self.iteration = iteration


class UntrainedBundleError(ValueError):
    pass


@dataclass
class AttackConfig:
    """One PGD run. Method-determined fields are filled from the method table
    when left as None and rejected when they contradict it."""

    method: str = "advdm"
    budget: float = 16 / 255
    step: float = 1 / 255
    iters: int = 100
    textural_weight: Optional[float] = None
    target_image: Optional[str] = None
    mc_samples: int = 1
    seed: int = 0
    use_sds: Optional[bool] = None
    direction: Optional[str] = None
    use_semantic: Optional[bool] = None
    use_textural: Optional[bool] = None

    def __post_init__(self):
        if self.method not in METHOD_TABLE:
            raise AttackConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        sem, tex, sds, direction = METHOD_TABLE[self.method]
        for name, want in (("use_semantic", sem), ("use_textural", tex), ("use_sds", sds),
                           ("direction", direction)):
            have = getattr(self, name)
            if have is None:
                setattr(self, name, want)
            elif have != want:
                raise AttackConfigError(f"{self.method}: {name}={have!r} contradicts method table ({want!r})")
        if self.textural_weight is None:
            self.textural_weight = DEFAULT_TEXTURAL_WEIGHT.get(self.method, 0.0)
        if self.use_textural and self.target_image is None:
            self.target_image = "pattern"
        if not 0 < self.budget <= 1:
            raise AttackConfigError(f"budget must lie in (0, 1], got {self.budget}")
        if self.step <= 0:
            raise AttackConfigError("step must be positive")
        if self.iters < 0:
            raise AttackConfigError("iters must be >= 0")
        if self.mc_samples < 1:
            raise AttackConfigError("mc_samples must be >= 1")
        if self.textural_weight < 0:
            raise AttackConfigError("textural_weight must be >= 0")
        if self.use_textural and self.textural_weight <= 0:
            raise AttackConfigError(f"{self.method} needs textural_weight > 0")

    @property
    def requires_target(self) -> bool:
        return bool(self.use_textural)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AttackConfigError(f"unknown AttackConfig keys: {sorted(unknown)}")
        return cls(**d)


def make_method(name: str, **overrides) -> AttackConfig:
    """Config template for one of the seven named methods."""
    if name not in METHOD_TABLE:
        raise AttackConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return AttackConfig(method=name, **overrides)


@dataclass
class ProtectionResult:
    x_adv: torch.Tensor
    delta: torch.Tensor
    loss_trace: dict
    grad_seconds_per_iter: float
    peak_workspace_bytes: int
    config: AttackConfig = field(default_factory=AttackConfig)
    iter_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))  # gradient wall time per iteration


# -- instrumentation ------------------------------------------------------------

class GradientStateProbe(contextlib.AbstractContextManager):
    """Counts tensors saved for backward, attributing those saved while the
    denoiser's forward is running.

    >>> with GradientStateProbe(bundle.denoiser) as probe:
    ...     sds_gradient(x, bundle, t, eps)
    >>> probe.denoiser_saved
    0
    """

    def __init__(self, denoiser=None):
        self.denoiser = denoiser
        self.total_saved = 0
        self.total_bytes = 0
        self.denoiser_saved = 0
        self._inside = 0
        self._handles = []
        self._hooks = None

    def _pack(self, t):
        self.total_saved += 1
        self.total_bytes += t.numel() * t.element_size()
        if self._inside:
            self.denoiser_saved += 1
        return t

    def __enter__(self):
        if self.denoiser is not None:
            def pre(_m, _a):
                self._inside += 1

            def post(_m, _a, _o):
                self._inside -= 1

            self._handles = [self.denoiser.register_forward_pre_hook(pre),
                             self.denoiser.register_forward_hook(post)]
        self._hooks = torch.autograd.graph.saved_tensors_hooks(self._pack, lambda t: t)
        self._hooks.__enter__()
        return self

    def __exit__(self, *exc):
        self._hooks.__exit__(*exc)
        for h in self._handles:
            h.remove()
        return False


# -- losses and gradients --------------------------------------------------------

def _require_trained(bundle):
    if not getattr(bundle, "trained", False):
        raise UntrainedBundleError("bundle is not marked trained (meta['trained'] is false)")


def _bt(t, batch):
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch) if t.dim() == 0 else t


def semantic_loss(x: torch.Tensor, bundle, t, eps: torch.Tensor, cond=None) -> torch.Tensor:
    """Per-sample noise-estimation error ``mean((eps_theta(z_t, t) - eps)^2)``
    with ``z_t`` forward-noised from the encoding of ``x``. Shape (B,)."""
    _require_trained(bundle)
    z0 = bundle.to_diffusion(x)
    ns = q_sample(z0, t, eps, bundle.schedule)
    pred = bundle.denoiser(ns.z_t, _bt(ns.t, x.shape[0]), cond)
    return ((pred - eps) ** 2).flatten(1).mean(1)


def textural_loss(x: torch.Tensor, y: torch.Tensor, bundle) -> torch.Tensor:
    """Per-sample ``-mean((E(x) - E(y))^2)`` on standardized latents. Shape (B,).

    Maximizing it pulls the latent of ``x`` toward the latent of ``y``.
    """
    if getattr(bundle, "encoder", None) is None:
        raise AttackConfigError("textural loss needs a bundle with an encoder")
    if y is None:
        raise MissingTargetError("textural loss needs a target image")
    if y.shape[-3:] != x.shape[-3:]:
        raise ValueError(f"target shape {tuple(y.shape)} does not match image shape {tuple(x.shape)}")
    zx = bundle.normalize(bundle.encode(x))
    zy = target_latent(y, bundle)
    return -((zx - zy) ** 2).flatten(1).mean(1)


def target_latent(y: torch.Tensor, bundle) -> torch.Tensor:
    with torch.no_grad():
        return bundle.normalize(bundle.encode(y))


def _full(x, bundle, t, eps, cond):
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = semantic_loss(x, bundle, t, eps, cond)
        (g,) = torch.autograd.grad(loss.sum(), x)
    return g, loss.detach()


def _sds(x, bundle, t, eps, cond):
    _require_trained(bundle)
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        z0 = bundle.to_diffusion(x)
        ns = q_sample(z0, t, eps, bundle.schedule)
    with torch.no_grad():
        pred = bundle.denoiser(ns.z_t.detach(), _bt(ns.t, x.shape[0]), cond)
    resid = pred - eps
    (g,) = torch.autograd.grad(ns.z_t, x, grad_outputs=resid)
    loss = (resid ** 2).flatten(1).mean(1)
    return g, loss


def full_semantic_gradient(x, bundle, t, eps, cond=None) -> torch.Tensor:
    """Exact gradient of the summed per-sample semantic loss w.r.t. ``x``."""
    return _full(x, bundle, t, eps, cond)[0]


def sds_gradient(x, bundle, t, eps, cond=None) -> torch.Tensor:
    """Score-distillation estimate ``(eps_theta(z_t, t) - eps) * dz_t/dx``.

    The denoiser runs without autograd; only the encoder and the forward
    noising are differentiated.
    """
    return _sds(x, bundle, t, eps, cond)[0]


def textural_gradient(x, y, bundle, zy=None) -> tuple:
    """Gradient of the summed textural loss; ``zy`` is an optional cached
    standardized target latent."""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        if zy is None:
            loss = textural_loss(x, y, bundle)
        else:
            loss = -((bundle.normalize(bundle.encode(x)) - zy) ** 2).flatten(1).mean(1)
        (g,) = torch.autograd.grad(loss.sum(), x)
    return g, loss.detach()


def latent_numel(bundle, x) -> int:
    if getattr(bundle, "encoder", None) is None:
        return int(x[0].numel())
    c, h, w = bundle.latent_shape(x.shape[-1])
    return c * h * w


# -- PGD -------------------------------------------------------------------------

def resolve_target(cfg: AttackConfig, x: torch.Tensor, target=None) -> Optional[torch.Tensor]:
    if not cfg.requires_target:
        return None
    if target is not None:
        y = torch.as_tensor(target, dtype=x.dtype)
    elif cfg.target_image == "pattern":
        y = torch.from_numpy(target_pattern(x.shape[-1], x.shape[1])).to(x.dtype)
    elif cfg.target_image:
        from .data import load_png
        y = torch.from_numpy(load_png(cfg.target_image)).to(x.dtype)
    else:
        raise MissingTargetError(f"{cfg.method} needs a target image")
    if y.dim() == 3:
        y = y[None]
    return y


def project(x_adv: torch.Tensor, x: torch.Tensor, budget: float) -> torch.Tensor:
    """Projection onto the l-inf ball around ``x`` intersected with [0, 1]."""
    return torch.clamp(torch.minimum(torch.maximum(x_adv, x - budget), x + budget), 0.0, 1.0)


def pgd_step(x_adv, x, g, step, budget, direction="ascent"):
    sgn = 1.0 if direction == "ascent" else -1.0
    return project(x_adv + sgn * step * torch.sign(g), x, budget)


def _draw(gen, bundle, like, zshape):
    t = torch.randint(0, bundle.schedule.T, (like.shape[0],), generator=gen)
    eps = torch.randn(zshape, generator=gen, dtype=like.dtype)
    return t, eps


def attack_direction(x_adv, bundle, cfg: AttackConfig, gen, y=None, cond=None, zy=None):
    """Ascent direction for one PGD iteration and the losses observed.

    Semantic term is signed by the method direction; the textural term always
    pulls toward the target.
    """
    g = torch.zeros_like(x_adv)
    sem_l = torch.full((x_adv.shape[0],), float("nan"))
    tex_l = torch.full((x_adv.shape[0],), float("nan"))
    if cfg.use_semantic:
        zshape = (x_adv.shape[0],) + tuple(_diffusion_shape(bundle, x_adv))
        gs = torch.zeros_like(x_adv)
        losses = []
        for _ in range(cfg.mc_samples):
            t, eps = _draw(gen, bundle, x_adv, zshape)
            if cfg.use_sds:
                gi, li = _sds(x_adv, bundle, t, eps, cond)
                gi = gi * (2.0 / latent_numel(bundle, x_adv))
            else:
                gi, li = _full(x_adv, bundle, t, eps, cond)
            gs += gi
            losses.append(li)
        gs /= cfg.mc_samples
        sem_l = torch.stack(losses).mean(0)
        g = g + (gs if cfg.direction == "ascent" else -gs)
    if cfg.use_textural:
        gt, tex_l = textural_gradient(x_adv, y, bundle, zy)
        g = g + cfg.textural_weight * gt
    return g, sem_l, tex_l


def _diffusion_shape(bundle, x):
    if getattr(bundle, "encoder", None) is None:
        return tuple(x.shape[1:])
    return bundle.latent_shape(x.shape[-1])


def pgd_protect(x: torch.Tensor, bundle, cfg: AttackConfig, target=None, cond=None,
                callback: Optional[Callable] = None) -> ProtectionResult:
    """Run ``cfg.iters`` signed-gradient steps inside the l-inf ball.

    ``callback(i, x_i)`` is invoked with every iterate, ``i = 0`` being the
    clean input.
    """
    single = x.dim() == 3
    if single:
        x = x[None]
    x = x.detach()
    if x.min() < 0 or x.max() > 1:
        raise ValueError("input image must lie in [0, 1]")
    if cfg.use_semantic:
        _require_trained(bundle)
    y = resolve_target(cfg, x, target)
    zy = None
    if y is not None:
        if getattr(bundle, "encoder", None) is None:
            raise AttackConfigError("textural loss needs a bundle with an encoder")
        if y.shape[-3:] != x.shape[-3:]:
            raise ValueError(f"target shape {tuple(y.shape)} does not match image shape {tuple(x.shape)}")
        zy = target_latent(y, bundle)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_adv = x.clone()
    sem_tr, tex_tr = [], []
    times = []
    peak = 0
    if callback is not None:
        callback(0, x_adv)
    for i in range(cfg.iters):
        probe = GradientStateProbe() if i == 0 else contextlib.nullcontext()
        t0 = time.perf_counter()
        with probe:
            g, sl, tl = attack_direction(x_adv, bundle, cfg, gen, y, cond, zy)
        times.append(time.perf_counter() - t0)
        if i == 0:
            peak = probe.total_bytes
        if not torch.isfinite(g).all():
            raise AttackDivergedError(i)
        x_adv = pgd_step(x_adv, x, g, cfg.step, cfg.budget, "ascent")
        sem_tr.append(sl.numpy())
        tex_tr.append(tl.numpy())
        if callback is not None:
            callback(i + 1, x_adv)
    B = x.shape[0]
    trace = {
        "semantic": np.stack(sem_tr) if sem_tr else np.zeros((0, B)),
        "textural": np.stack(tex_tr) if tex_tr else np.zeros((0, B)),
    }
    delta = x_adv - x
    if single:
        x_adv, delta = x_adv[0], delta[0]
    return ProtectionResult(
        x_adv=x_adv, delta=delta, loss_trace=trace,
        grad_seconds_per_iter=sum(times) / max(cfg.iters, 1),
        peak_workspace_bytes=int(peak), config=cfg, iter_seconds=np.asarray(times))


def latent_pgd(z: torch.Tensor, bundle, budget: float, step: Optional[float] = None,
               iters: int = 100, seed: int = 0, cond=None) -> torch.Tensor:
    """PGD ascent on the noise-estimation loss directly in latent space.

    ``z`` is a raw encoder latent; ``budget`` and ``step`` are in standardized
    latent units. Default step keeps the pixel attack's budget/step ratio of 16.
    Returns the raw adversarial latent.
    """
    _require_trained(bundle)
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if step is None:
        step = budget / 16
    z0 = bundle.normalize(z.detach())
    zn = z0.clone()
    if budget == 0 or iters == 0:
        return z.detach().clone()
    gen = torch.Generator().manual_seed(seed)
    for i in range(iters):
        t = torch.randint(0, bundle.schedule.T, (zn.shape[0],), generator=gen)
        eps = torch.randn(zn.shape, generator=gen, dtype=zn.dtype)
        zi = zn.detach().requires_grad_(True)
        with torch.enable_grad():
            ns = q_sample(zi, t, eps, bundle.schedule)
            loss = ((bundle.denoiser(ns.z_t, t, cond) - eps) ** 2).flatten(1).mean(1)
            (g,) = torch.autograd.grad(loss.sum(), zi)
        if not torch.isfinite(g).all():
            raise AttackDivergedError(i)
        zn = zn + step * torch.sign(g)
        zn = torch.minimum(torch.maximum(zn, z0 - budget), z0 + budget)
    return bundle.denormalize(zn)


# -- persistence -------------------------------------------------------------------

def save_result(result: ProtectionResult, out_dir, name: str) -> dict:
    """Write ``<name>.png`` (protected image), ``<name>_delta.npz`` (exact
    float perturbation) and ``<name>.json`` (trace, timing, config)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x_adv = result.x_adv.detach().numpy()
    delta = result.delta.detach().numpy()
    if x_adv.ndim == 4:
        if x_adv.shape[0] != 1:
            raise ValueError("save_result writes one image; split batched results first")
        x_adv, delta = x_adv[0], delta[0]
    paths = {"image": out / f"{name}.png", "delta": out / f"{name}_delta.npz",
             "sidecar": out / f"{name}.json"}
    save_png(x_adv, paths["image"])
    save_array(delta, paths["delta"])
    side = {
        "config": result.config.to_dict(),
        "loss_trace": {k: np.asarray(v, dtype=np.float64).reshape(len(v), -1)[:, 0].tolist() if len(v) else []
                       for k, v in result.loss_trace.items()},
        "grad_seconds_per_iter": result.grad_seconds_per_iter,
        "peak_workspace_bytes": result.peak_workspace_bytes,
        "linf": float(np.abs(delta).max()) if delta.size else 0.0,
    }
    paths["sidecar"].write_text(json.dumps(_finite(side), indent=2, sort_keys=True))
    return {k: str(v) for k, v in paths.items()}


def split_result(result: ProtectionResult) -> list:
    """Split a batched result into per-image results."""
    if result.x_adv.dim() == 3:
        return [result]
    return [ProtectionResult(result.x_adv[i:i + 1], result.delta[i:i + 1],
                             {k: np.asarray(v)[:, i:i + 1] for k, v in result.loss_trace.items()},
                             result.grad_seconds_per_iter, result.peak_workspace_bytes, result.config,
                             result.iter_seconds)
            for i in range(result.x_adv.shape[0])]


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
