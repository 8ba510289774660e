"""Patch-based training of the conditional U-Net and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ConsistencyError,
    FormatError,
    NumericalError,
    SchemaError,
    TruncatedFileError,
    UnsupportedError,
    ValidationError,
)
from .model import ConditionalUNet, ModelConfig, condition_vector
from .preprocess import SubtractionBundle
from .tensor import AdamState, adam_step, backward, cosine_lr
from .volio import AcquisitionMeta, LabelVolume, Volume, check_same_geometry

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1
CE_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainSample:
    """One preprocessed training case.

    ``local_std_sd`` is kept only for the denormalization factor.
    """

    bundle_ld: SubtractionBundle
    target: Volume
    ce_mask: Volume
    brain: LabelVolume
    meta: AcquisitionMeta
    x_ld: Volume
    local_std_sd: Optional[Volume] = None
    case_id: str = ""

    def __post_init__(self):
        check_same_geometry(self.bundle_ld.z_norm, self.target, self.ce_mask, self.brain, self.x_ld)
        if self.meta.noise_level is None:
            raise ValidationError("training metadata needs the low-dose noise level")

    def inputs(self) -> np.ndarray:
        """3 x D x H x W network input: z_LD, x_LD, s_LD."""
        b = self.bundle_ld
        return np.stack([b.z_norm.data, self.x_ld.data, b.local_std.data])


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch: int = 4
    patch: int = 32
    lr0: float = 1e-4
    lr1: float = 1e-6
    lambda1: float = 0.01
    lambda2: float = 1.0
    huber_eps: float = 0.1
    margin: int = 8
    seed: int = 0
    oversample: float = 0.5
    log_every: int = 50
    precision: str = "f32"

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.patch < 1:
            raise ValidationError("iterations >= 0, batch >= 1 and patch >= 1 required")
        if not 2 * self.margin < self.patch:
            raise ValidationError(f"margin {self.margin} leaves nothing of patch {self.patch}")
        if self.precision not in ("f32", "f64"):
            raise ValidationError("precision must be 'f32' or 'f64'")
        if self.lambda1 <= 0 or self.lambda2 < 0 or self.huber_eps <= 0:
            raise ValidationError("lambda1 > 0, lambda2 >= 0 and huber_eps > 0 required")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "f64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(cls, doc: dict):
    """Build a config dataclass, rejecting unknown keys by name."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise SchemaError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    return cls(**doc)


# ------------------------------------------------------------------ patches


def sample_patch(sample: TrainSample, patch: int, rng: np.random.Generator,
                 oversample: float = 0.5, tries: int = 10) -> dict:
    """Random aligned crop of every member volume.

    With probability ``oversample`` the corner is redrawn (up to ``tries``
    times) until the crop holds a voxel with CE mask above 0.5.
    """
    dims = sample.brain.dims
    if any(d < patch for d in dims):
        raise ValidationError(f"volume {dims} smaller than patch {patch}")
    p_full = sample.ce_mask.data

    def corner():
        return tuple(int(rng.integers(0, d - patch + 1)) for d in dims)

    c = corner()
    if rng.random() < oversample:
        for _ in range(tries):
            sl = tuple(slice(o, o + patch) for o in c)
            if (p_full[sl] > CE_THRESHOLD).any():
                break
            c = corner()
    sl = tuple(slice(o, o + patch) for o in c)
    return {
        "corner": c,
        "inputs": sample.inputs()[(slice(None),) + sl],
        "target": sample.target.data[sl],
        "brain": sample.brain.mask[sl].astype(np.float32),
        "ce_mask": p_full[sl],
    }


# --------------------------------------------------------------------- loss


def weighted_huber_loss(y_hat: torch.Tensor, y: torch.Tensor, brain: torch.Tensor,
                        p: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Mean over interior voxels of (b + lambda1 + lambda2 p) * huber(y_hat - y).

    Voxels closer than ``cfg.margin`` to the patch border are not counted.
    """
    if not (y_hat.shape == y.shape == brain.shape == p.shape):
        raise ValidationError(
            f"loss inputs differ in shape: {[tuple(t.shape) for t in (y_hat, y, brain, p)]}")
    m = cfg.margin
    if m:
        if any(2 * m >= s for s in y.shape[-3:]):
            raise ValidationError("margin removes every voxel")
        inner = (Ellipsis, slice(m, -m), slice(m, -m), slice(m, -m))
        y_hat, y, brain, p = y_hat[inner], y[inner], brain[inner], p[inner]
    d = F.huber_loss(y_hat, y, reduction="none", delta=cfg.huber_eps)
    w = brain + cfg.lambda1 + cfg.lambda2 * p
    return (w * d).mean()


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    state: dict
    gamma: float
    seed: int
    history: list = field(default_factory=list)

    def build_model(self) -> ConditionalUNet:
        model = ConditionalUNet(self.model_config)
        expected = model.state_dict()
        for name, t in self.state.items():
            if name not in expected:
                raise ConsistencyError(f"checkpoint tensor {name!r} is not part of the model")
            if tuple(expected[name].shape) != tuple(t.shape):
                raise ConsistencyError(
                    f"{name}: shape {tuple(t.shape)} does not match config {tuple(expected[name].shape)}")
        missing = sorted(set(expected) - set(self.state))
        if missing:
            raise ConsistencyError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        dtype = next(iter(self.state.values())).dtype
        model = model.to(dtype)
        model.load_state_dict(self.state)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Layout: b"CFCK", u32 version, u32 header length, JSON header, raw tensors.

    Tensors are little-endian float32 or float64, in header order.
    """
    table, blobs, offset = [], [], 0
    for name, t in ckpt.state.items():
        arr = t.detach().cpu().contiguous().numpy()
        code = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}[arr.dtype]
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": code,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "gamma": ckpt.gamma,
        "seed": ckpt.seed,
        "history": ckpt.history,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: too short for a checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedError(f"{path}: checkpoint version {version} is not supported")
    if len(raw) < 12 + hlen:
        raise TruncatedFileError(f"{path}: checkpoint header truncated")
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    base = 12 + hlen
    state = {}
    for entry in header["tensors"]:
        dtype = np.dtype("<f4") if entry["dtype"] == "f32" else np.dtype("<f8")
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise TruncatedFileError(f"{path}: tensor {entry['name']} truncated")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if count * dtype.itemsize != entry["nbytes"]:
            raise ConsistencyError(f"{path}: tensor {entry['name']} size disagrees with its shape")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        state[entry["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")).reshape(entry["shape"]))
    ckpt = Checkpoint(
        model_config=ModelConfig(**header["model"]),
        train_config=TrainConfig(**header["train"]),
        state=state,
        gamma=float(header["gamma"]),
        seed=int(header["seed"]),
        history=[list(h) for h in header.get("history", [])],
    )
    ckpt.build_model()  # shape check against the stored config
    return ckpt


# ----------------------------------------------------------------- training


def compute_gamma_for(samples: Sequence[TrainSample]) -> float:
    from .infer import compute_gamma

    triples = [(s.local_std_sd, s.bundle_ld.local_std, s.brain) for s in samples]
    if any(t[0] is None for t in triples):
        log.warning("standard-dose local std missing; using gamma = 1")
        return 1.0
    return compute_gamma(triples)


def _batch(samples, idx, cfg, rng, model_cfg, dtype):
    patches = [sample_patch(samples[i], cfg.patch, rng, cfg.oversample) for i in idx]

    def stack(key):
        arr = np.stack([p[key] for p in patches]).astype(np.float64)
        t = torch.from_numpy(arr).to(dtype)
        return t if key == "inputs" else t[:, None]

    cond = torch.tensor([condition_vector(samples[i].meta, model_cfg) for i in idx], dtype=dtype)
    x = stack("inputs").contiguous(memory_format=torch.channels_last_3d)
    return x, cond, stack("target"), stack("brain"), stack("ce_mask")


def train(dataset: Sequence[TrainSample], cfg: TrainConfig, model_cfg: ModelConfig,
          on_log: Optional[Callable[[int, float, float], None]] = None,
          init_state: Optional[dict] = None) -> Checkpoint:
    """Adam on random patch batches with the cosine schedule.

    Every step's loss is kept in the checkpoint history; ``on_log(step, lr,
    loss)`` fires every ``cfg.log_every`` steps and after the last one.
    """
    if not dataset:
        raise ValidationError("training needs at least one sample")
    if cfg.patch % model_cfg.divisor:
        raise ValidationError(f"patch {cfg.patch} not divisible by {model_cfg.divisor}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.dtype
    model = ConditionalUNet(model_cfg).to(dtype)
    if init_state is not None:
        model.load_state_dict(init_state)
    model = model.to(memory_format=torch.channels_last_3d)
    params = [p for p in model.parameters()]
    state = AdamState.zeros_like(params)
    history = []
    n = len(dataset)
    for step in range(cfg.iterations):
        lr = cosine_lr(step, cfg.iterations, cfg.lr0, cfg.lr1)
        idx = rng.integers(0, n, size=cfg.batch)
        x, cond, y, brain, p = _batch(dataset, idx, cfg, rng, model_cfg, dtype)
        for q in params:
            q.grad = None
        y_hat = model(x, cond)
        loss = weighted_huber_loss(y_hat, y, brain, p, cfg)
        value = float(loss.detach())
        if not math.isfinite(value):
            ids = [dataset[i].case_id or str(int(i)) for i in idx]
            raise NumericalError(f"non-finite loss at step {step} (lr={lr:.3g}, batch={ids})")
        backward(loss, params)
        adam_step(params, [q.grad for q in params], state, lr)
        history.append([step, lr, value])
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            if on_log:
                on_log(step, lr, value)
            log.info("step %d lr %.3g loss %.5g", step, lr, value)
    gamma = compute_gamma_for(dataset)
    out_state = {k: v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    return Checkpoint(model_cfg, cfg, out_state, gamma, cfg.seed, history)


def smoothed(history: List[list], window: int = 5) -> np.ndarray:
    """Moving average of the logged losses."""
    losses = np.array([h[2] for h in history], dtype=np.float64)
    if losses.size < window:
        return losses
    kernel = np.ones(window) / window
    return np.convolve(losses, kernel, mode="valid")
