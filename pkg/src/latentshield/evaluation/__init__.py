"""Metrics, purification defenses and report assembly."""

from .metrics import (
    MetricError,
    cosine,
    feature_distance,
    feature_similarity,
    features,
    frechet_distance,
    frechet_feature_distance,
    frechet_from_features,
    high_frequency_energy,
    ia_score,
    psnr,
    ssim,
)
from .purify import PURIFIERS, SmoothParams, purify_crop_resize, purify_jpeg, purify_smooth
from .report import MetricsReport, build_report
