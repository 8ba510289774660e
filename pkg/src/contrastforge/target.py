"""Noise-free contrast signal targets from standard-dose subtraction images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .volio import Volume, check_same_geometry

LOW_ANCHOR = 0.01
HIGH_ANCHOR = 0.99


@dataclass(frozen=True)
class LogisticParams:
    w: float
    b: float

    def __post_init__(self):
        if not self.w > 0:
            raise ValidationError(f"logistic slope must be positive, got {self.w}")

    def __call__(self, z):
        return expit(self.w * np.asarray(z, dtype=np.float64) + self.b)


def fit_logistic_params(sigma_ld: float) -> LogisticParams:
    """Sigmoid with f(sigma) = 0.01 and f(4 sigma) = 0.99.

    Solving both anchors gives w = 2 ln 99 / (3 sigma), b = -5/3 ln 99; the
    midpoint f = 0.5 falls at 2.5 sigma.
    """
    if not sigma_ld > 0:
        raise ValidationError(f"sigma_ld must be positive, got {sigma_ld}")
    lo = math.log(LOW_ANCHOR / (1 - LOW_ANCHOR))
    hi = math.log(HIGH_ANCHOR / (1 - HIGH_ANCHOR))
    w = (hi - lo) / (3.0 * sigma_ld)
    return LogisticParams(w=w, b=lo - w * sigma_ld)


def ce_mask(z_sd: Volume, p: LogisticParams) -> Volume:
    return z_sd.like(p(z_sd.data))


def extract_target(z_sd: Volume, mask: Volume) -> Volume:
    """Hadamard product of the CE mask with the subtraction image."""
    check_same_geometry(z_sd, mask)
    md = mask.data
    if md.min() < 0 or md.max() > 1:
        raise ValidationError("CE mask must lie in [0, 1]")
    return z_sd.like(md.astype(np.float64) * z_sd.data)


def contrast_target(z_sd: Volume, sigma_ld: float):
    """Convenience: (y_SD, p_SD) for a normalized standard-dose subtraction."""
    p = ce_mask(z_sd, fit_logistic_params(sigma_ld))
    return extract_target(z_sd, p), p
