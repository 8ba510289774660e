"""Synthetic (pre-contrast, low-dose, standard-dose) triplets with known truth.

Anatomy is an ellipsoidal brain with three nested tissue compartments under
a smooth multiplicative bias. Lesions are soft-edged spheres of constant
enhancement. Signal scales linearly with dose; each image gets its own
Gaussian noise draw whose std varies smoothly in space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ValidationError
from .volio import (
    AcquisitionMeta,
    LabelVolume,
    Volume,
    write_labels,
    write_meta,
    write_volume,
)

# (field strength, relaxivity) pairs of the two agents, 1.5 T and 3 T
AGENTS = {
    "gadobutrol": {1.5: 4.6, 3.0: 4.5},
    "gadoterate": {1.5: 3.9, 3.0: 3.4},
}
REFERENCE_STRENGTH = 4.5 * 3.0
TISSUE = (0.6, 0.95, 0.35)  # outer, middle, inner compartment


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    n_lesions: tuple = (1, 5)
    lesion_radius: tuple = (2.0, 6.0)
    enhancement_amp: tuple = (0.3, 0.6)
    dose: float = 0.33
    noise_sigma: float = 0.02
    bias_field_strength: float = 0.0
    seed: int = 0
    noise_seed: Optional[int] = None
    multi_site: bool = False
    field_strength: float = 3.0
    relaxivity: float = 4.5

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("n_lesions", "lesion_radius", "enhancement_amp"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} range is empty: {lo} > {hi}")
            object.__setattr__(self, name, (lo, hi))
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValidationError(f"phantom dims must be 3 values >= 8, got {self.dims}")
        if self.n_lesions[0] < 0:
            raise ValidationError("n_lesions must be non-negative")
        if self.lesion_radius[0] <= 0 or self.enhancement_amp[0] <= 0:
            raise ValidationError("lesion radius and amplitude must be positive")
        if not 0 < self.dose <= 1:
            raise ValidationError(f"dose must lie in (0, 1], got {self.dose}")
        if self.noise_sigma < 0 or self.bias_field_strength < 0:
            raise ValidationError("noise_sigma and bias_field_strength must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dims", "n_lesions", "lesion_radius", "enhancement_amp"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class PhantomTruth:
    """Ground truth of one phantom.

    ``anatomy`` is the noise-free pre-contrast image, so ``anatomy + y_true``
    is the clean standard-dose reference.
    """

    y_true: Volume
    lesions: LabelVolume
    brain: LabelVolume
    noise_field: Volume
    anatomy: Volume
    amplitudes: tuple = field(default=())


def _grid(dims):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")


def _smooth_field(rng, coords, center, radii) -> np.ndarray:
    """Low-order polynomial field scaled to [0, 1] over the volume."""
    u = [(c - c0) / r for c, c0, r in zip(coords, center, radii)]
    a = rng.normal(size=3)
    q = rng.normal(size=3) * 0.5
    f = sum(ai * ui for ai, ui in zip(a, u)) + sum(qi * ui * ui for qi, ui in zip(q, u))
    f = f - f.min()
    return f / max(f.max(), 1e-12)


def _bump(dist: np.ndarray, radius: float) -> np.ndarray:
    """1 inside ``radius - 1``, cosine taper to 0 at ``radius + 1``."""
    t = np.clip((dist - (radius - 1.0)) / 2.0, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def generate(cfg: PhantomConfig):
    """Returns (x_pc, x_ld, x_sd, truth, meta)."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    coords = _grid(dims)
    center = [(n - 1) / 2.0 for n in dims]
    radii = [0.42 * n for n in dims]
    rho = np.sqrt(sum(((c - c0) / r) ** 2 for c, c0, r in zip(coords, center, radii)))
    brain = rho <= 1.0

    anatomy = np.zeros(dims)
    anatomy[brain] = TISSUE[0]
    anatomy[rho <= 0.7] = TISSUE[1]
    anatomy[rho <= 0.3] = TISSUE[2]
    intensity_bias = 1.0 + 0.2 * cfg.bias_field_strength * (_smooth_field(rng, coords, center, radii) - 0.5)
    anatomy = anatomy * intensity_bias

    if cfg.multi_site:
        agent = ("gadobutrol", "gadoterate")[int(rng.integers(0, 2))]
        strength = (1.5, 3.0)[int(rng.integers(0, 2))]
        relax = AGENTS[agent][strength]
        site_gain = relax * strength / REFERENCE_STRENGTH
    else:
        strength, relax, site_gain = cfg.field_strength, cfg.relaxivity, 1.0

    y = np.zeros(dims)
    lesions = np.zeros(dims, dtype=np.int32)
    amps = []
    n_les = int(rng.integers(cfg.n_lesions[0], cfg.n_lesions[1] + 1))
    placed = []
    for k in range(1, n_les + 1):
        for _ in range(100):
            r = float(rng.uniform(*cfg.lesion_radius))
            # the whole taper must stay inside the brain
            c = [float(rng.uniform(c0 - 0.75 * R + r + 1, c0 + 0.75 * R - r - 1))
                 for c0, R in zip(center, radii)]
            rel = np.sqrt(sum(((ci - c0) / R) ** 2 for ci, c0, R in zip(c, center, radii)))
            if rel + (r + 1) / min(radii) > 0.95:
                continue
            if all(np.linalg.norm(np.subtract(c, pc)) > r + pr + 3 for pc, pr in placed):
                break
        else:
            raise ValidationError(f"could not place lesion {k} without overlap after 100 attempts")
        placed.append((c, r))
        amp = float(rng.uniform(*cfg.enhancement_amp)) * site_gain
        amps.append(amp)
        dist = np.sqrt(sum((g - ci) ** 2 for g, ci in zip(coords, c)))
        y += amp * _bump(dist, r)
        lesions[dist <= r] = k

    noise_std = cfg.noise_sigma * (1.0 + cfg.bias_field_strength
                                   * _smooth_field(rng, coords, center, radii))
    noise_rng = rng if cfg.noise_seed is None else np.random.default_rng(cfg.noise_seed)

    def noisy(base):
        return base + noise_std * noise_rng.standard_normal(dims)

    x_pc = noisy(anatomy)
    x_ld = noisy(anatomy + cfg.dose * y)
    x_sd = noisy(anatomy + y)

    sp = (1.0, 1.0, 1.0)
    truth = PhantomTruth(
        y_true=Volume(y.astype(np.float32), sp),
        lesions=LabelVolume(lesions, sp, n_labels=n_les),
        brain=LabelVolume(brain.astype(np.int32), sp, n_labels=1),
        noise_field=Volume(noise_std.astype(np.float32), sp),
        anatomy=Volume(anatomy.astype(np.float32), sp),
        amplitudes=tuple(amps),
    )
    meta = AcquisitionMeta(cfg.dose, strength, relax)
    return (Volume(x_pc.astype(np.float32), sp), Volume(x_ld.astype(np.float32), sp),
            Volume(x_sd.astype(np.float32), sp), truth, meta)


CASE_FILES = ("pc", "ld", "sd", "brain", "lesions", "ytrue")


def write_case(case_dir, x_pc, x_ld, x_sd, truth: PhantomTruth, meta: AcquisitionMeta,
               extra: Optional[dict] = None) -> Path:
    """``<case>/{pc,ld,sd,brain,lesions,ytrue,anatomy}.nii`` plus ``meta.json``."""
    d = Path(case_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(x_pc, d / "pc.nii")
    write_volume(x_ld, d / "ld.nii")
    write_volume(x_sd, d / "sd.nii")
    write_labels(truth.brain, d / "brain.nii")
    write_labels(truth.lesions, d / "lesions.nii")
    write_volume(truth.y_true, d / "ytrue.nii")
    write_volume(truth.anatomy, d / "anatomy.nii")
    write_meta(meta, d / "meta.json", extra)
    return d


def oracle_reference(truth: PhantomTruth) -> Volume:
    """Clean standard-dose image: noise-free anatomy plus the true signal."""
    return truth.anatomy.like(truth.anatomy.data.astype(np.float64) + truth.y_true.data)


def oracle_report(case: str, x: Volume, truth: PhantomTruth, peak: float = 1.0,
                  scale: float = 1.0):
    """Metrics of ``x`` against the clean reference instead of the noisy x_SD.

    ``scale`` maps raw phantom intensities into the space of ``x`` (for
    preprocessed outputs, 1 / the pre-contrast percentile scale).
    """
    from .infer import evaluate

    ref = oracle_reference(truth)
    if scale != 1.0:
        ref = ref.like(ref.data * np.float64(scale))
    anatomy = truth.anatomy.like(truth.anatomy.data * np.float64(scale))
    ce = (truth.y_true.data > 0.5 * min(truth.amplitudes)) & truth.brain.mask if truth.amplitudes else None
    return evaluate(case, x, ref, anatomy, truth.brain, truth.lesions, ce, peak)


def dataset_manifest(out_dir, cases: list, cfg: PhantomConfig) -> None:
    doc = {"config": cfg.to_dict(), "cases": cases}
    Path(out_dir, "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
