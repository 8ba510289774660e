"""Metadata-conditioned 3-D U-Net predicting the standard-dose contrast signal.

Layout for ``scales = S``:

* input conv 3 -> C0
* encoder, scale k < S-1: two CRBs at Ck, keep skip, conv Ck -> Ck+1, blur-pool
* bottleneck: two CRBs at C(S-1)
* decoder, scale k = S-2 .. 0: 1x1x1 conv Ck+1 -> Ck, trilinear x2,
  gated fusion with the skip, two CRBs
* output conv C0 -> 1, ReLU

with ``Ck = base_channels * 2**k``. The condition vector is embedded once
by a two-layer MLP and added as a per-channel bias inside every CRB.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .tensor import blurpool3d, conv3d, linear, pointwise, silu, upsample_trilinear

FULL_CONDITION = ("dose", "field_strength", "relaxivity", "noise_level")
REDUCED_CONDITION = ("noise_level",)


@dataclass(frozen=True)
class ModelConfig:
    scales: int = 4
    base_channels: int = 32
    embed_dim: int = 128
    in_channels: int = 3
    out_channels: int = 1
    cond_dim: int = 4

    def __post_init__(self):
        if self.scales < 1:
            raise ValidationError("scales must be >= 1")
        if self.base_channels < 1 or self.embed_dim < 1:
            raise ValidationError("channel counts must be positive")
        if self.cond_dim not in (1, 4):
            raise ValidationError("cond_dim must be 4 (full) or 1 (noise level only)")

    def channels(self, k: int) -> int:
        return self.base_channels * 2 ** k

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)

    @property
    def condition_keys(self) -> tuple:
        return FULL_CONDITION if self.cond_dim == 4 else REDUCED_CONDITION

    def to_dict(self) -> dict:
        return asdict(self)


def condition_vector(meta, config: ModelConfig) -> list:
    """Raw condition scalars in the order the embedding expects."""
    if meta.noise_level is None:
        raise ValidationError("metadata has no noise level; preprocess first")
    return [float(getattr(meta, k)) for k in config.condition_keys]


def _kaiming_uniform(shape, fan_in) -> nn.Parameter:
    bound = math.sqrt(6.0 / fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class Conv(nn.Module):
    def __init__(self, cin, cout, k=3, zero=False):
        super().__init__()
        self.weight = _kaiming_uniform((cout, cin, k, k, k), cin * k ** 3)
        self.bias = nn.Parameter(torch.zeros(cout))
        if zero:
            nn.init.zeros_(self.weight)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, fin, fout, zero=False):
        super().__init__()
        self.weight = _kaiming_uniform((fout, fin), fin)
        self.bias = nn.Parameter(torch.zeros(fout))
        if zero:
            nn.init.zeros_(self.weight)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Embedding(nn.Module):
    """e = fc2(silu(fc1(c)))."""

    def __init__(self, cond_dim, embed_dim):
        super().__init__()
        self.cond_dim = cond_dim
        self.fc1 = Linear(cond_dim, embed_dim)
        self.fc2 = Linear(embed_dim, embed_dim)

    def forward(self, c):
        if c.dim() != 2 or c.shape[1] != self.cond_dim:
            raise ValidationError(f"condition must be N x {self.cond_dim}, got {tuple(c.shape)}")
        return self.fc2(silu(self.fc1(c)))


class CRB(nn.Module):
    """Conditional residual block without normalization layers."""

    def __init__(self, channels, embed_dim):
        super().__init__()
        self.conv_a = Conv(channels, channels)
        self.proj = Linear(embed_dim, channels)
        # zero residual branch at init, as in diffusion U-Nets
        self.conv_b = Conv(channels, channels, zero=True)

    def forward(self, f, e):
        if f.shape[1] != self.conv_a.weight.shape[0]:
            raise ValidationError("CRB channel mismatch")
        h = self.conv_a(silu(f))
        h = h + self.proj(e)[:, :, None, None, None]
        h = self.conv_b(silu(h))
        return f + h


class GatedFuse(nn.Module):
    """f = sigmoid(G1 [fu fs]) * W1 fu + sigmoid(G2 [fu fs]) * W2 fs, all 1x1x1."""

    def __init__(self, channels):
        super().__init__()
        self.gate_u = Conv(2 * channels, channels, k=1)
        self.gate_s = Conv(2 * channels, channels, k=1)
        self.w_u = Conv(channels, channels, k=1)
        self.w_s = Conv(channels, channels, k=1)

    def forward(self, f_u, f_s):
        if f_u.shape != f_s.shape:
            raise ValidationError(f"fusion inputs differ: {tuple(f_u.shape)} vs {tuple(f_s.shape)}")
        both = torch.cat([f_u, f_s], dim=1)
        return (pointwise(self.gate_u(both), "sigmoid") * self.w_u(f_u)
                + pointwise(self.gate_s(both), "sigmoid") * self.w_s(f_s))


class ConditionalUNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        S, E = config.scales, config.embed_dim
        ch = config.channels
        self.embed = Embedding(config.cond_dim, E)
        self.inp = Conv(config.in_channels, ch(0))
        self.enc = nn.ModuleList(
            nn.ModuleList([CRB(ch(k), E), CRB(ch(k), E)]) for k in range(S - 1))
        self.down = nn.ModuleList(Conv(ch(k), ch(k + 1)) for k in range(S - 1))
        self.mid = nn.ModuleList([CRB(ch(S - 1), E), CRB(ch(S - 1), E)])
        self.up = nn.ModuleList(Conv(ch(k + 1), ch(k), k=1) for k in range(S - 1))
        self.fuse = nn.ModuleList(GatedFuse(ch(k)) for k in range(S - 1))
        self.dec = nn.ModuleList(
            nn.ModuleList([CRB(ch(k), E), CRB(ch(k), E)]) for k in range(S - 1))
        # zero output layer: the untrained model predicts no enhancement
        self.out = Conv(ch(0), config.out_channels, zero=True)

    def embedding(self, c):
        c = torch.as_tensor(c, dtype=self.inp.weight.dtype)
        if c.dim() == 1:
            c = c[None]
        return self.embed(c)

    def forward(self, x, c):
        """``x``: N x 3 x D x H x W stack of (z_LD, x_LD, s_LD); ``c``: N x cond_dim."""
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ValidationError(f"expected N x {self.config.in_channels} x D x H x W input")
        e = self.embedding(c)
        if e.shape[0] == 1 and x.shape[0] > 1:
            e = e.expand(x.shape[0], -1)
        dims = x.shape[2:]
        x, crop = _pad_to_multiple(x, self.config.divisor)
        f = self.inp(x)
        skips = []
        for k, blocks in enumerate(self.enc):
            for blk in blocks:
                f = blk(f, e)
            skips.append(f)
            f = blurpool3d(self.down[k](f))
        for blk in self.mid:
            f = blk(f, e)
        for k in reversed(range(self.config.scales - 1)):
            # 1x1x1 conv commutes with trilinear interpolation; apply it coarse
            f_u = upsample_trilinear(self.up[k](f))
            f = self.fuse[k](f_u, skips[k])
            for blk in self.dec[k]:
                f = blk(f, e)
        y = pointwise(self.out(f), "relu")
        if crop:
            y = y[..., : dims[0], : dims[1], : dims[2]]
        return y


def _pad_to_multiple(x, m):
    dims = x.shape[2:]
    extra = [(-d) % m for d in dims]
    if not any(extra):
        return x, False
    pads = []
    for e in reversed(extra):
        pads += [0, e]
    mode = "reflect" if all(e < d for e, d in zip(extra, dims)) else "replicate"
    return F.pad(x, pads, mode=mode), True


def unet_forward(z_ld, x_ld, s_ld, c, model: ConditionalUNet):
    """Stack the three input volumes as channels and run the network."""
    x = torch.stack([torch.as_tensor(v) for v in (z_ld, x_ld, s_ld)], dim=-4)
    if x.dim() == 4:
        x = x[None]
    x = x.to(model.inp.weight.dtype)
    return model(x, c)


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count of :class:`ConditionalUNet`."""
    E, S = config.embed_dim, config.scales

    def conv(cin, cout, k=3):
        return cout * cin * k ** 3 + cout

    def crb(c):
        return 2 * conv(c, c) + E * c + c

    def fuse(c):
        return 2 * conv(2 * c, c, 1) + 2 * conv(c, c, 1)

    ch = config.channels
    n = (config.cond_dim * E + E) + (E * E + E)
    n += conv(config.in_channels, ch(0))
    for k in range(S - 1):
        n += 2 * crb(ch(k)) + conv(ch(k), ch(k + 1))
        n += conv(ch(k + 1), ch(k), 1) + fuse(ch(k)) + 2 * crb(ch(k))
    n += 2 * crb(ch(S - 1))
    n += conv(ch(0), config.out_channels)
    return n


def receptive_radius(config: ModelConfig) -> int:
    """Upper bound, in input voxels, on how far one input voxel can reach."""
    S = config.scales
    r = 1  # input conv
    for k in range(S - 1):
        r += 4 * 2 ** k  # two CRBs, two 3x3x3 convs each
        r += 2 ** k + 2 * 2 ** k  # widening conv, then the 5-tap blur
    r += 4 * 2 ** (S - 1)
    for k in reversed(range(S - 1)):
        r += 2 ** (k + 1)  # trilinear interpolation reaches one coarse voxel
        r += 4 * 2 ** k
    return r + 1  # output conv
