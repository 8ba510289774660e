"""Volume containers, NIfTI-1 (single file) I/O, JSON metadata sidecars and
isotropic resampling.

Arrays are indexed ``data[i, j, k]`` with ``i`` along the first NIfTI axis.
On disk the payload is x-fastest, which is numpy Fortran order.
"""

from __future__ import annotations

import gzip
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .errors import (
    FormatError,
    GeometryError,
    RangeError,
    SchemaError,
    TruncatedFileError,
    UnsupportedError,
    ValidationError,
)

PathLike = Union[str, Path]

# NIfTI-1 header, 348 bytes. Byte order is applied per file.
_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(_HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == 348

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
_GZIP_MAGIC = b"\x1f\x8b"
_XFORM_KEYS = ("qform_code", "sform_code", "quatern_b", "quatern_c", "quatern_d",
               "qoffset_x", "qoffset_y", "qoffset_z", "srow_x", "srow_y", "srow_z")


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or len(spacing) != 3:
        raise GeometryError(f"expected 3 dims and 3 spacings, got {dims}, {spacing}")
    if any(d <= 0 for d in dims):
        raise GeometryError(f"dims must be positive, got {dims}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise GeometryError(f"spacing must be positive and finite, got {spacing}")
    return dims, spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3-D float32 scalar field with voxel spacing in mm.

    ``xform`` carries the header orientation fields through I/O untouched.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    xform: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"volume data must be 3-D, got shape {data.shape}")
        _, spacing = _check_geometry(data.shape, self.spacing)
        data = np.array(data, dtype=np.float32, copy=True)
        if not np.isfinite(data).all():
            raise ValidationError("volume contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    def like(self, data) -> "Volume":
        """New volume with this geometry and different values."""
        return Volume(np.asarray(data).reshape(self.dims), self.spacing, self.xform)

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label map: 0 is background, k >= 1 a region index."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    n_labels: Optional[int] = None
    xform: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise GeometryError(f"label data must be 3-D, got shape {raw.shape}")
        _, spacing = _check_geometry(raw.shape, self.spacing)
        if raw.dtype.kind == "f":
            if not np.isfinite(raw).all() or np.any(raw != np.round(raw)):
                raise ValidationError("labels must be integral")
        data = np.array(raw, dtype=np.int32, copy=True)
        if data.size and data.min() < 0:
            raise ValidationError("labels must be non-negative")
        top = int(data.max()) if data.size else 0
        n_labels = top if self.n_labels is None else int(self.n_labels)
        if top > n_labels:
            raise ValidationError(f"label {top} exceeds declared count {n_labels}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "n_labels", n_labels)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def mask(self) -> np.ndarray:
        return self.data > 0

    def labels(self) -> list:
        return [int(k) for k in np.unique(self.data) if k > 0]

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing, self.xform)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and np.array_equal(self.data, other.data))


def check_same_geometry(*vols) -> None:
    first = vols[0]
    for v in vols[1:]:
        if not first.same_geometry(v):
            raise GeometryError(
                f"geometry mismatch: {first.dims}/{first.spacing} vs {v.dims}/{v.spacing}")


FIELD_STRENGTHS = (1.5, 3.0)


@dataclass(frozen=True)
class AcquisitionMeta:
    """Per-scan acquisition parameters.

    ``noise_level`` stays ``None`` until preprocessing estimates it.
    """

    dose: float
    field_strength: float
    relaxivity: float
    noise_level: Optional[float] = None

    def __post_init__(self):
        for name in ("dose", "field_strength", "relaxivity"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(f"{name} must be a number, got {value!r}")
            object.__setattr__(self, name, float(value))
        if not (0.0 < self.dose <= 1.0):
            raise RangeError(f"dose must lie in (0, 1], got {self.dose}")
        if self.field_strength not in FIELD_STRENGTHS:
            raise RangeError(f"field_strength must be 1.5 or 3, got {self.field_strength}")
        if not (math.isfinite(self.relaxivity) and self.relaxivity > 0):
            raise RangeError(f"relaxivity must be positive, got {self.relaxivity}")
        if self.noise_level is not None:
            nl = float(self.noise_level)
            if not (math.isfinite(nl) and nl > 0):
                raise RangeError(f"noise_level must be positive, got {self.noise_level}")
            object.__setattr__(self, "noise_level", nl)

    def with_noise(self, sigma: float) -> "AcquisitionMeta":
        return AcquisitionMeta(self.dose, self.field_strength, self.relaxivity, sigma)

    def to_dict(self) -> dict:
        out = {"dose": self.dose, "field_strength": self.field_strength,
               "relaxivity": self.relaxivity}
        if self.noise_level is not None:
            out["noise_level"] = self.noise_level
        return out


def meta_from_dict(doc: dict) -> AcquisitionMeta:
    if not isinstance(doc, dict):
        raise SchemaError("metadata must be a JSON object")
    missing = [k for k in ("dose", "field_strength", "relaxivity") if k not in doc]
    if missing:
        raise SchemaError(f"metadata is missing key(s): {', '.join(missing)}")
    return AcquisitionMeta(doc["dose"], doc["field_strength"], doc["relaxivity"],
                           doc.get("noise_level"))


def read_meta(path: PathLike) -> AcquisitionMeta:
    """Load an acquisition sidecar; extra keys are kept by the caller, not here."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return meta_from_dict(doc)


def write_meta(meta: AcquisitionMeta, path: PathLike, extra: Optional[dict] = None) -> None:
    doc = dict(extra or {})
    doc.update(meta.to_dict())
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def sidecar_path(image_path: PathLike) -> Path:
    """``<name>.json`` next to ``<name>.nii`` or ``<name>.nii.gz``."""
    p = Path(image_path)
    name = p.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)] + ".json")
    return p.with_suffix(".json")


# ---------------------------------------------------------------- NIfTI-1


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_header(raw: bytes, path) -> np.ndarray:
    if len(raw) < 348:
        raise TruncatedFileError(f"{path}: file shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == 348:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    magic = bytes(hdr["magic"])
    if magic[:3] == b"ni1":
        raise UnsupportedError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic[:3] != b"n+1":
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
    return hdr


def read_volume(path: PathLike) -> Volume:
    """Read a 3-D single-file NIfTI-1 image (optionally gzipped).

    Integer payloads are converted to float; ``scl_slope``/``scl_inter`` are
    applied when the slope is nonzero.
    """
    path = Path(path)
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    dim = [int(d) for d in hdr["dim"]]
    if dim[0] != 3 and not (dim[0] > 3 and all(d == 1 for d in dim[4 : dim[0] + 1])):
        raise UnsupportedError(f"{path}: only 3 spatial dims are supported (dim[0]={dim[0]})")
    dims = tuple(dim[1:4])
    spacing = tuple(abs(float(p)) for p in hdr["pixdim"][1:4])
    if any(d <= 0 for d in dims):
        raise FormatError(f"{path}: non-positive dims {dims}")
    code = int(hdr["datatype"])
    if code not in NIFTI_DTYPES:
        raise UnsupportedError(f"{path}: unsupported datatype code {code}")
    # every field shares one byte order, so the first multi-byte one tells it
    order = hdr.dtype.fields["sizeof_hdr"][0].byteorder
    dtype = NIFTI_DTYPES[code].newbyteorder("<" if order in "<=" else ">")
    offset = int(hdr["vox_offset"])
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    if offset < 348 or len(raw) < offset + nbytes:
        raise TruncatedFileError(
            f"{path}: payload truncated ({len(raw) - offset} of {nbytes} bytes)")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(dims, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and math.isfinite(slope) and (slope != 1.0 or inter != 0.0):
        data = arr.astype(np.float64) * slope + inter
    else:
        data = arr
    xform = {k: (hdr[k].tolist() if np.ndim(hdr[k]) else hdr[k].item()) for k in _XFORM_KEYS}
    return Volume(np.asarray(data, dtype=np.float32), spacing, xform)


def _build_header(dims, spacing, code: int, xform: Optional[dict]) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *dims, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = NIFTI_DTYPES[code].itemsize * 8
    hdr["pixdim"] = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = b"n+1\x00"
    if xform:
        for k, v in xform.items():
            hdr[k] = v
    else:
        hdr["sform_code"] = 1
        hdr["srow_x"] = [spacing[0], 0, 0, 0]
        hdr["srow_y"] = [0, spacing[1], 0, 0]
        hdr["srow_z"] = [0, 0, spacing[2], 0]
    return hdr


def _encode(hdr: np.ndarray, payload: np.ndarray) -> bytes:
    return hdr.tobytes() + b"\x00" * 4 + np.asfortranarray(payload).tobytes(order="F")


def _write_bytes(path: Path, blob: bytes) -> None:
    if path.name.endswith(".gz"):
        # mtime pinned so reruns are byte-identical
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def write_volume(v: Volume, path: PathLike) -> None:
    """Write ``v`` as a float32 NIfTI-1 file; ``.gz`` suffix selects gzip."""
    if not isinstance(v, Volume):
        raise ValidationError("write_volume expects a Volume")
    if not np.isfinite(v.data).all():
        raise ValidationError("refusing to write non-finite data")
    hdr = _build_header(v.dims, v.spacing, 16, v.xform)
    _write_bytes(Path(path), _encode(hdr, v.data.astype("<f4")))


def write_labels(lv: LabelVolume, path: PathLike) -> None:
    """Write a label map as uint8 (or int16 when labels exceed 255)."""
    code = 2 if lv.data.max(initial=0) <= 255 else 4
    hdr = _build_header(lv.dims, lv.spacing, code, lv.xform)
    _write_bytes(Path(path), _encode(hdr, lv.data.astype(NIFTI_DTYPES[code].newbyteorder("<"))))


def read_labels(path: PathLike) -> LabelVolume:
    v = read_volume(path)
    return LabelVolume(v.data, v.spacing, xform=v.xform)


# ---------------------------------------------------------------- resampling


def resample_isotropic(v: Volume, target_spacing: float) -> Volume:
    """Trilinear resampling onto an isotropic grid with clamp-to-edge borders.

    Voxel ``i`` sits at ``i * spacing`` along each axis, so both grids share
    their first voxel center.
    """
    t = float(target_spacing)
    if not (math.isfinite(t) and t > 0):
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    if t > 4 * max(v.spacing):
        warnings.warn(
            f"target spacing {t} is coarser than 4x the input spacing {v.spacing}",
            RuntimeWarning, stacklevel=2)
    out_dims = tuple(max(1, int(round(d * s / t))) for d, s in zip(v.dims, v.spacing))
    axes = [np.arange(n) * (t / s) for n, s in zip(out_dims, v.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    return Volume(out.astype(np.float32), (t, t, t))
