"""Glue between the stages: case preparation and synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .infer import denormalize, predict, synthesize
from .preprocess import SubtractionBundle, preprocess_pair
from .target import contrast_target
from .trainer import TrainSample
from .volio import (
    AcquisitionMeta,
    LabelVolume,
    Volume,
    meta_from_dict,
    read_labels,
    read_volume,
    write_volume,
)


@dataclass(frozen=True)
class PreparedCase:
    bundle_ld: SubtractionBundle
    bundle_sd: SubtractionBundle
    target: Volume
    ce_mask: Volume
    meta: AcquisitionMeta

    def sample(self, case_id: str = "") -> TrainSample:
        return TrainSample(
            bundle_ld=self.bundle_ld, target=self.target, ce_mask=self.ce_mask,
            brain=self.bundle_ld.brain, meta=self.meta, x_ld=self.bundle_ld.ce_norm,
            local_std_sd=self.bundle_sd.local_std, case_id=case_id)


def prepare_case(x_pc: Volume, x_ld: Volume, x_sd: Volume, brain: LabelVolume,
                 meta: AcquisitionMeta, **opts) -> PreparedCase:
    """Preprocess both pairs and extract the training target.

    The standard-dose pair is normalized with the low-dose sigma, and the
    CE mask is fitted to that same sigma. ``opts`` go to preprocess_pair.
    """
    b_ld = preprocess_pair(x_pc, x_ld, brain, **opts)
    b_sd = preprocess_pair(x_pc, x_sd, brain, sigma_ref=b_ld.sigma, **opts)
    y, p = contrast_target(b_sd.z_norm, b_ld.sigma)
    return PreparedCase(b_ld, b_sd, y, p, meta.with_noise(b_ld.sigma))


@dataclass(frozen=True)
class Synthesis:
    y_hat: Volume  # normalized network output
    y_tilde: Volume  # contrast signal in pre-contrast intensity units
    x_sd: Volume  # pre-contrast + signal
    x_sd_plus: Volume  # low-dose + signal


def synthesize_case(model, gamma: float, bundle_ld: SubtractionBundle,
                    meta: AcquisitionMeta) -> Synthesis:
    """Run the network on a low-dose bundle and build both synthetic images.

    Outputs live in the pre-contrast normalized intensity space.
    """
    if meta.noise_level is None:
        meta = meta.with_noise(bundle_ld.sigma)
    y_hat = predict(model, bundle_ld.z_norm, bundle_ld.ce_norm, bundle_ld.local_std, meta)
    y_tilde = denormalize(y_hat, bundle_ld.local_std, gamma, bundle_ld.sigma_scale)
    return Synthesis(y_hat, y_tilde, synthesize(bundle_ld.pc_norm, y_tilde),
                     synthesize(bundle_ld.ce_norm, y_tilde))


# ------------------------------------------------------------ case folders
#
# A case folder holds the raw inputs (pc, ld, sd, brain, meta.json) and,
# after preprocessing, one set of bundle volumes per tag:
# z0_<tag>, z_<tag>, m_<tag>, s_<tag> and x<tag>_norm, plus xpc_norm.
# Bundle scalars live under "preprocess" in meta.json.

SCALARS = ("sigma", "sigma_scale", "pc_scale", "ce_scale", "alpha")


def read_case_doc(case_dir) -> dict:
    path = Path(case_dir, "meta.json")
    if not path.exists():
        raise ValidationError(f"{case_dir}: meta.json is missing")
    return json.loads(path.read_text())


def write_case_doc(case_dir, doc: dict) -> None:
    Path(case_dir, "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def case_meta(doc: dict) -> AcquisitionMeta:
    return meta_from_dict(doc)


def _member(case_dir, name) -> Path:
    for suffix in (".nii", ".nii.gz"):
        path = Path(case_dir, name + suffix)
        if path.exists():
            return path
    raise ValidationError(f"{case_dir}: {name}.nii is missing")


def read_member(case_dir, name) -> Volume:
    return read_volume(_member(case_dir, name))


def read_brain(case_dir) -> LabelVolume:
    return read_labels(_member(case_dir, "brain"))


def has_member(case_dir, name) -> bool:
    return any(Path(case_dir, name + s).exists() for s in (".nii", ".nii.gz"))


def save_bundle(case_dir, tag: str, b: SubtractionBundle) -> dict:
    """Write the volumes of one bundle; returns its scalars for meta.json."""
    d = Path(case_dir)
    write_volume(b.z_init, d / f"z0_{tag}.nii")
    write_volume(b.z_norm, d / f"z_{tag}.nii")
    write_volume(b.local_mean, d / f"m_{tag}.nii")
    write_volume(b.local_std, d / f"s_{tag}.nii")
    write_volume(b.pc_norm, d / "xpc_norm.nii")
    write_volume(b.ce_norm, d / f"x{tag}_norm.nii")
    return {k: float(getattr(b, k)) for k in SCALARS}


def load_bundle(case_dir, tag: str, doc: dict = None) -> SubtractionBundle:
    doc = read_case_doc(case_dir) if doc is None else doc
    try:
        scalars = doc["preprocess"][tag]
    except KeyError:
        raise ValidationError(f"{case_dir}: no preprocessed {tag} bundle") from None
    return SubtractionBundle(
        z_init=read_member(case_dir, f"z0_{tag}"), z_norm=read_member(case_dir, f"z_{tag}"),
        local_mean=read_member(case_dir, f"m_{tag}"), local_std=read_member(case_dir, f"s_{tag}"),
        brain=read_brain(case_dir), pc_norm=read_member(case_dir, "xpc_norm"),
        ce_norm=read_member(case_dir, f"x{tag}_norm"), **scalars)


def load_training_sample(case_dir) -> TrainSample:
    doc = read_case_doc(case_dir)
    b_ld = load_bundle(case_dir, "ld", doc)
    s_sd = read_member(case_dir, "s_sd") if has_member(case_dir, "s_sd") else None
    if not has_member(case_dir, "ysd"):
        raise ValidationError(f"{case_dir}: no target; run the target stage first")
    return TrainSample(bundle_ld=b_ld, target=read_member(case_dir, "ysd"),
                       ce_mask=read_member(case_dir, "psd"), brain=b_ld.brain,
                       meta=case_meta(doc).with_noise(b_ld.sigma), x_ld=b_ld.ce_norm,
                       local_std_sd=s_sd, case_id=Path(case_dir).name)
