"""Contrast-preserving preprocessing of pre-contrast / contrast-enhanced pairs.

Pipeline: brain-percentile normalization, scalar radiometric registration,
subtraction, noise level estimate from the negative tail, masked local
statistics and noise normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import (
    ConvergenceError,
    DegenerateIntensityError,
    EstimationError,
    ValidationError,
)
from .volio import LabelVolume, Volume, check_same_geometry

log = logging.getLogger(__name__)

HUBER_DELTA = 0.1
LOCAL_STATS_SIGMA = 16.0
KERNEL_TRUNCATE = 3.0
MIN_NEGATIVE_VOXELS = 1000


@dataclass(frozen=True)
class SubtractionBundle:
    """Artifacts of one preprocessed (pre-contrast, contrast-enhanced) pair.

    ``sigma`` is the noise level estimated on this pair's own subtraction;
    ``sigma_scale`` is the factor used in the normalization (the paired
    low-dose sigma for standard-dose bundles).
    """

    z_init: Volume
    z_norm: Volume
    local_mean: Volume
    local_std: Volume
    sigma: float
    sigma_scale: float
    brain: LabelVolume
    pc_norm: Volume
    ce_norm: Volume
    pc_scale: float
    ce_scale: float
    alpha: float


def _brain(brain: LabelVolume) -> np.ndarray:
    mask = brain.mask
    if not mask.any():
        raise ValidationError("brain mask is empty")
    return mask


def percentile_normalize(v: Volume, brain: LabelVolume, q: float = 95.0):
    """Scale ``v`` so the ``q``-th brain percentile maps to 1. Returns (volume, scale)."""
    check_same_geometry(v, brain)
    mask = _brain(brain)
    scale = float(np.percentile(v.data[mask].astype(np.float64), q))
    if not scale > 0:
        raise DegenerateIntensityError(f"brain {q}th percentile is {scale}, must be positive")
    return v.like(v.data / np.float32(scale)), scale


def huber_irls_scale(moving: np.ndarray, fixed: np.ndarray, delta: float = HUBER_DELTA,
                     rtol: float = 1e-6, max_iter: int = 100) -> float:
    """Minimize sum huber(a*moving - fixed) over the scalar a by IRLS."""
    m = moving.astype(np.float64).ravel()
    f = fixed.astype(np.float64).ravel()
    mm = m @ m
    if mm == 0:
        raise DegenerateIntensityError("moving image is zero inside the brain")
    alpha = (m @ f) / mm
    for _ in range(max_iter):
        r = np.abs(alpha * m - f)
        w = np.where(r <= delta, 1.0, delta / np.maximum(r, delta))
        new = ((w * m) @ f) / ((w * m) @ m)
        if abs(new - alpha) <= rtol * abs(new):
            return float(new)
        alpha = new
    raise ConvergenceError(f"radiometric registration did not converge in {max_iter} iterations")


def radiometric_register(moving: Volume, fixed: Volume, brain: LabelVolume,
                         delta: float = HUBER_DELTA):
    """Rescale ``moving`` onto ``fixed`` with a robust scalar fit inside the brain."""
    check_same_geometry(moving, fixed, brain)
    mask = _brain(brain)
    alpha = huber_irls_scale(moving.data[mask], fixed.data[mask], delta)
    return moving.like(moving.data.astype(np.float64) * alpha), alpha


def subtract(ce: Volume, pc: Volume) -> Volume:
    check_same_geometry(ce, pc)
    return ce.like(ce.data.astype(np.float64) - pc.data)


def estimate_noise_sigma(z: Volume, brain: LabelVolume,
                         min_count: int = MIN_NEGATIVE_VOXELS) -> float:
    """Noise std from the root-mean-square of the negative brain values.

    For zero-mean Gaussian noise E[z^2 | z < 0] = sigma^2, and positive
    contrast uptake leaves the negative tail untouched.
    """
    check_same_geometry(z, brain)
    vals = z.data[_brain(brain)].astype(np.float64)
    neg = vals[vals < 0]
    if neg.size < min_count:
        raise EstimationError(
            f"only {neg.size} negative brain voxels, need at least {min_count}")
    return float(np.sqrt(np.mean(neg * neg)))


def _gauss(a: np.ndarray, sigma: float) -> np.ndarray:
    # zero padding: the normalized convolution divides the same support back out
    return ndimage.gaussian_filter(a, sigma, mode="constant", cval=0.0,
                                   truncate=KERNEL_TRUNCATE)


def local_noise_stats(z: Volume, brain: LabelVolume, sigma: float,
                      kernel_sigma: float = LOCAL_STATS_SIGMA):
    """Local mean and std of ``z`` restricted to voxels with ``|z| <= 2 sigma``.

    Uses normalized Gaussian filtering. ``s`` is floored at ``sigma / 10``.
    Voxels whose whole neighborhood is masked get ``m = 0`` and ``s`` at the
    floor.
    """
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    check_same_geometry(z, brain)
    zz = z.data.astype(np.float64)
    keep = (np.abs(zz) <= 2.0 * sigma).astype(np.float64)
    weight = _gauss(keep, kernel_sigma)
    first = _gauss(keep * zz, kernel_sigma)
    second = _gauss(keep * zz * zz, kernel_sigma)
    # weights below this are indistinguishable from an empty neighborhood
    empty = weight <= 1e-12
    safe = np.where(empty, 1.0, weight)
    m = np.where(empty, 0.0, first / safe)
    var = np.where(empty, 0.0, second / safe - m * m)
    floor = sigma / 10.0
    s = np.sqrt(np.maximum(var, floor * floor))
    n_empty = int(np.count_nonzero(empty & brain.mask))
    if n_empty:
        log.warning("%d brain voxels have a fully masked neighborhood", n_empty)
    return z.like(m), z.like(s)


def noise_normalize(z_init: Volume, m: Volume, s: Volume, sigma_ld: float) -> Volume:
    """``(z_init - m) / s * sigma_ld`` voxelwise."""
    check_same_geometry(z_init, m, s)
    if not sigma_ld > 0:
        raise ValidationError(f"sigma_ld must be positive, got {sigma_ld}")
    sd = s.data.astype(np.float64)
    if not (sd > 0).all():
        raise ValidationError("local std must be positive everywhere")
    out = (z_init.data.astype(np.float64) - m.data) / sd * sigma_ld
    return z_init.like(out)


def preprocess_pair(pc: Volume, ce: Volume, brain: LabelVolume,
                    sigma_ref: Optional[float] = None, percentile: float = 95.0,
                    huber_delta: float = HUBER_DELTA,
                    kernel_sigma: float = LOCAL_STATS_SIGMA) -> SubtractionBundle:
    """Run the full chain on one pair.

    ``sigma_ref`` (the low-dose noise level) replaces this pair's own sigma
    as the normalization factor; pass it for standard-dose pairs.
    """
    check_same_geometry(pc, ce, brain)
    pc_n, pc_scale = percentile_normalize(pc, brain, percentile)
    ce_n, ce_scale = percentile_normalize(ce, brain, percentile)
    ce_r, alpha = radiometric_register(ce_n, pc_n, brain, huber_delta)
    z0 = subtract(ce_r, pc_n)
    sigma = estimate_noise_sigma(z0, brain)
    m, s = local_noise_stats(z0, brain, sigma, kernel_sigma)
    scale = sigma if sigma_ref is None else float(sigma_ref)
    z = noise_normalize(z0, m, s, scale)
    return SubtractionBundle(z_init=z0, z_norm=z, local_mean=m, local_std=s, sigma=sigma,
                             sigma_scale=scale, brain=brain, pc_norm=pc_n, ce_norm=ce_r,
                             pc_scale=pc_scale, ce_scale=ce_scale, alpha=alpha)
