"""Inference (denormalization, synthesis) and image quality metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ValidationError
from .model import ConditionalUNet, condition_vector
from .volio import LabelVolume, Volume, check_same_geometry

log = logging.getLogger(__name__)

INF_SENTINEL = "inf"
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1, SSIM_K2 = 0.01, 0.03


# ---------------------------------------------------------- denormalization


def compute_gamma(train_bundles: Sequence[tuple]) -> float:
    """Mean over samples of <b, s_SD> / <b, s_LD>.

    ``train_bundles`` holds (s_SD, s_LD, brain) triples.
    """
    if not train_bundles:
        raise ValidationError("gamma needs at least one sample")
    ratios = []
    for s_sd, s_ld, brain in train_bundles:
        check_same_geometry(s_sd, s_ld, brain)
        b = brain.mask
        den = float(s_ld.data[b].astype(np.float64).sum())
        if not den > 0:
            raise ValidationError("brain-summed low-dose local std is not positive")
        ratios.append(float(s_sd.data[b].astype(np.float64).sum()) / den)
    return float(np.mean(ratios))


def denormalize(y_hat: Volume, s_ld: Volume, gamma: float, sigma_ld: float = 1.0) -> Volume:
    """Map the network output back to image intensities: gamma * s_LD * y_hat / sigma_LD.

    The normalized images carry a factor sigma_LD / s; dividing by
    ``sigma_ld`` undoes it. The default of 1 gives the bare gamma * s * y_hat.
    """
    check_same_geometry(y_hat, s_ld)
    if not gamma > 0 or not sigma_ld > 0:
        raise ValidationError("gamma and sigma_ld must be positive")
    scale = s_ld.data.astype(np.float64) * (gamma / sigma_ld)
    return y_hat.like(scale * y_hat.data)


def synthesize(base: Volume, y_tilde: Volume) -> Volume:
    """Add the contrast signal to x_PC (standard dose) or x_LD (beyond standard)."""
    check_same_geometry(base, y_tilde)
    return base.like(base.data.astype(np.float64) + y_tilde.data)


@torch.no_grad()
def predict(model: ConditionalUNet, z_ld: Volume, x_ld: Volume, s_ld: Volume, meta) -> Volume:
    """Whole-volume network prediction in the normalized domain."""
    check_same_geometry(z_ld, x_ld, s_ld)
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.stack([z_ld.data, x_ld.data, s_ld.data])[None].astype(np.float64))
    x = x.to(dtype).contiguous(memory_format=torch.channels_last_3d)
    c = torch.tensor([condition_vector(meta, model.config)], dtype=dtype)
    y = model.eval()(x, c)[0, 0].contiguous().numpy()
    return z_ld.like(y)


# ------------------------------------------------------------------ metrics


def _region(region, dims) -> np.ndarray:
    if region is None:
        return np.ones(dims, dtype=bool)
    data = region.data if isinstance(region, (Volume, LabelVolume)) else np.asarray(region)
    if data.shape != tuple(dims):
        raise ValidationError(f"region shape {data.shape} does not match {dims}")
    return data > 0.5 if data.dtype.kind == "f" else data > 0


def psnr(x: Volume, ref: Volume, region=None, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over ``region`` (whole image when None).

    Returns ``math.inf`` when the region matches exactly.
    """
    check_same_geometry(x, ref)
    mask = _region(region, x.dims)
    if not mask.any():
        raise ValidationError("PSNR region is empty")
    diff = x.data[mask].astype(np.float64) - ref.data[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_lesions(x: Volume, ref: Volume, lesions: LabelVolume, peak: float = 1.0) -> List[float]:
    """PSNR for each lesion label, in label order."""
    return [psnr(x, ref, lesions.data == k, peak) for k in lesions.labels()]


def _ssim_map(a: np.ndarray, b: np.ndarray, peak: float) -> np.ndarray:
    def blur(v):
        return ndimage.gaussian_filter(v, SSIM_SIGMA, mode="reflect",
                                       truncate=SSIM_RADIUS / SSIM_SIGMA)

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(x: Volume, ref: Volume, peak: float = 1.0) -> float:
    """Mean SSIM with an 11^3 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    check_same_geometry(x, ref)
    a = x.data.astype(np.float64)
    b = ref.data.astype(np.float64)
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean(_ssim_map(a, b, peak)))


def ce_region(p_sd: Volume, brain: LabelVolume, threshold: float = 0.5) -> np.ndarray:
    """Contrast-enhancing voxels: CE mask above ``threshold`` inside the brain."""
    check_same_geometry(p_sd, brain)
    return (p_sd.data > threshold) & brain.mask


def mae_ce(x: Volume, ref: Volume, region) -> float:
    check_same_geometry(x, ref)
    mask = _region(region, x.dims)
    if not mask.any():
        raise ValidationError("CE region is empty")
    return float(np.mean(np.abs(x.data[mask].astype(np.float64) - ref.data[mask])))


def relative_enhancement(x: Volume, x_pc: Volume, x_sd: Volume, lesions: LabelVolume):
    """Per-lesion mean and maximal enhancement relative to the standard dose.

    Lesions whose reference enhancement (sum or max) is not positive get NaN
    and a warning; :func:`nanmean` skips them.
    """
    check_same_geometry(x, x_pc, x_sd, lesions)
    num = x.data.astype(np.float64) - x_pc.data
    den = x_sd.data.astype(np.float64) - x_pc.data
    c_mean, c_max = [], []
    for k in lesions.labels():
        sel = lesions.data == k
        s_den, m_den = den[sel].sum(), den[sel].max()
        if not (s_den > 0 and m_den > 0):
            log.warning("lesion %d has no reference enhancement; excluded", k)
            c_mean.append(math.nan)
            c_max.append(math.nan)
            continue
        c_mean.append(float(num[sel].sum() / s_den))
        c_max.append(float(num[sel].max() / m_den))
    return c_mean, c_max


def nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


# ------------------------------------------------------------------ reports


@dataclass
class MetricsReport:
    case: str
    psnr_image: float
    psnr_brain: float
    psnr_lesions: List[float] = field(default_factory=list)
    ssim: float = math.nan
    mae_ce: float = math.nan
    c_mean: List[float] = field(default_factory=list)
    c_max: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.psnr_lesions) == len(self.c_mean) == len(self.c_max)):
            raise ValidationError("lesion-indexed metric lists differ in length")

    @property
    def psnr_lesion_mean(self) -> float:
        finite = [v for v in self.psnr_lesions if not math.isnan(v)]
        return float(np.mean(finite)) if finite else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr_lesion_mean"] = self.psnr_lesion_mean
        return _encode_floats(d)

    def row(self) -> dict:
        return {
            "case": self.case,
            "psnr_image": _fmt(self.psnr_image),
            "psnr_brain": _fmt(self.psnr_brain),
            "psnr_lesion_mean": _fmt(self.psnr_lesion_mean),
            "ssim": _fmt(self.ssim),
            "mae_ce": _fmt(self.mae_ce),
            "c_mean": _fmt(nanmean(self.c_mean)),
            "c_max": _fmt(nanmean(self.c_max)),
            "n_lesions": len(self.c_mean),
        }

    def lesion_rows(self) -> list:
        return [{"case": self.case, "lesion": i + 1, "psnr": _fmt(p),
                 "c_mean": _fmt(cm), "c_max": _fmt(cx)}
                for i, (p, cm, cx) in enumerate(zip(self.psnr_lesions, self.c_mean, self.c_max))]


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return INF_SENTINEL if v > 0 else "-" + INF_SENTINEL
        if math.isnan(v):
            return "nan"
    return v


def _encode_floats(obj):
    if isinstance(obj, dict):
        return {k: _encode_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_encode_floats(v) for v in obj]
    return _fmt(obj)


def evaluate(case: str, x: Volume, ref: Volume, x_pc: Volume, brain: LabelVolume,
             lesions: Optional[LabelVolume] = None, ce: Optional[np.ndarray] = None,
             peak: float = 1.0, ref_sd: Optional[Volume] = None) -> MetricsReport:
    """Full metric set of ``x`` against ``ref``.

    ``ref_sd`` is the standard-dose image used in the relative enhancement
    denominators; it defaults to ``ref``.
    """
    ref_sd = ref if ref_sd is None else ref_sd
    lesion_psnr, c_mean, c_max = [], [], []
    if lesions is not None and lesions.labels():
        lesion_psnr = psnr_lesions(x, ref, lesions, peak)
        c_mean, c_max = relative_enhancement(x, x_pc, ref_sd, lesions)
    mae = mae_ce(x, ref, ce) if ce is not None and ce.any() else math.nan
    return MetricsReport(
        case=case,
        psnr_image=psnr(x, ref, None, peak),
        psnr_brain=psnr(x, ref, brain, peak),
        psnr_lesions=lesion_psnr,
        ssim=ssim(x, ref, peak),
        mae_ce=mae,
        c_mean=c_mean,
        c_max=c_max,
    )


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and std per metric across cases; lesion metrics pooled over lesions."""
    def stats(vals):
        vals = [v for v in vals if isinstance(v, float) and math.isfinite(v)]
        if not vals:
            return {"mean": "nan", "std": "nan", "n": 0}
        return {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}

    return {
        "psnr_image": stats([r.psnr_image for r in reports]),
        "psnr_brain": stats([r.psnr_brain for r in reports]),
        "psnr_lesion": stats([p for r in reports for p in r.psnr_lesions]),
        "ssim": stats([r.ssim for r in reports]),
        "mae_ce": stats([r.mae_ce for r in reports]),
        "c_mean": stats([c for r in reports for c in r.c_mean]),
        "c_max": stats([c for r in reports for c in r.c_max]),
    }


def write_reports(reports: Sequence[MetricsReport], csv_path, lesion_csv_path, json_path) -> None:
    rows = [r.row() for r in reports]
    agg = aggregate(reports)
    fields_ = ["case", "psnr_image", "psnr_brain", "psnr_lesion_mean", "ssim", "mae_ce",
               "c_mean", "c_max", "n_lesions"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields_)
        w.writeheader()
        w.writerows(rows)
        for label, key in (("mean", "mean"), ("std", "std")):
            w.writerow({"case": label,
                        "psnr_image": agg["psnr_image"][key], "psnr_brain": agg["psnr_brain"][key],
                        "psnr_lesion_mean": agg["psnr_lesion"][key], "ssim": agg["ssim"][key],
                        "mae_ce": agg["mae_ce"][key], "c_mean": agg["c_mean"][key],
                        "c_max": agg["c_max"][key], "n_lesions": ""})
    with open(lesion_csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["case", "lesion", "psnr", "c_mean", "c_max"])
        w.writeheader()
        for r in reports:
            w.writerows(r.lesion_rows())
    with open(json_path, "w") as fh:
        json.dump({"cases": [r.to_dict() for r in reports], "aggregate": agg}, fh, indent=2)
