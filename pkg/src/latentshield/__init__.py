"""Desk-scale latent diffusion lab for adversarial image protection.

Trains a toy latent diffusion model, crafts protective perturbations with
semantic/textural PGD (exact or score-distillation gradients, ascent or
descent), runs mimicry edits against them and measures the outcome.
"""

__version__ = "0.1.0"

from .attacks import METHODS, AttackConfig, ProtectionResult, make_method, pgd_protect
from .diffusion import NoiseSchedule, ddim_sample, make_schedule, q_sample
from .models import LdmBundle, PixelDmBundle
