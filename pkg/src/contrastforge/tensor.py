"""Differentiable operators used by the network, plus Adam and the cosine
learning-rate schedule.

Feature maps are ``torch.Tensor`` objects laid out N x C x D x H x W.
Gradients are recorded by torch's autograd graph; :func:`backward` wraps it
with the accumulate-on-repeat contract used by the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ValidationError

BINOMIAL_5 = (1.0, 4.0, 6.0, 4.0, 1.0)


def conv3d(x: torch.Tensor, k: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1, pad: Optional[int] = None) -> torch.Tensor:
    """3-D cross-correlation with zero padding (``pad`` defaults to same-size)."""
    if x.dim() != 5 or k.dim() != 5:
        raise ValidationError(f"conv3d expects 5-D input and kernel, got {tuple(x.shape)}, {tuple(k.shape)}")
    if k.shape[1] != x.shape[1]:
        raise ValidationError(f"kernel expects {k.shape[1]} input channels, got {x.shape[1]}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise ValidationError(f"bias shape {tuple(bias.shape)} does not match {k.shape[0]} outputs")
    if pad is None:
        pad = (k.shape[2] - 1) // 2
    return F.conv3d(x, k, bias, stride=stride, padding=pad)


def _binomial(dtype, device) -> torch.Tensor:
    taps = torch.tensor(BINOMIAL_5, dtype=dtype, device=device)
    return taps / taps.sum()


def blurpool3d(x: torch.Tensor) -> torch.Tensor:
    """Fixed [1,4,6,4,1]/16 low-pass per axis with edge clamping, then stride 2.

    The three separable passes equal one 5x5x5 outer-product kernel.
    """
    if x.dim() != 5:
        raise ValidationError("blurpool3d expects N x C x D x H x W input")
    if min(x.shape[2:]) < 2:
        raise ValidationError(f"blurpool3d needs spatial dims >= 2, got {tuple(x.shape[2:])}")
    n, c = x.shape[:2]
    taps = _binomial(x.dtype, x.device)
    y = F.pad(x, (2, 2, 2, 2, 2, 2), mode="replicate")
    for axis in range(3):
        shape = [1, 1, 1]
        shape[axis] = 5
        stride = [1, 1, 1]
        stride[axis] = 2
        kernel = taps.view(1, 1, *shape).expand(c, 1, *shape)
        y = F.conv3d(y, kernel, stride=stride, groups=c)
    return y


def upsample_trilinear(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="trilinear", align_corners=False)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    # clamp passes the gradient at exactly 0, so a zero-initialized layer
    # feeding this still learns
    return x.clamp(min=0)


_POINTWISE = {"silu": silu, "sigmoid": torch.sigmoid, "relu": relu}


def pointwise(x: torch.Tensor, kind: str) -> torch.Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValidationError(f"unknown activation {kind!r}") from None
    return fn(x)


def linear(x: torch.Tensor, W: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[1]:
        raise ValidationError(f"linear: input has {x.shape[-1]} features, weight expects {W.shape[1]}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise ValidationError("linear: bias shape mismatch")
    return F.linear(x, W, bias)


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor] = ()) -> None:
    """Accumulate d(loss)/d(param) into ``.grad``.

    Parameters the loss does not reach get an explicit zero gradient.
    Repeated calls accumulate; callers reset gradients between steps.
    """
    if loss.numel() != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = torch.zeros_like(p)


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params],
                   [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam, applied in place."""
    if not (len(params) == len(grads) == len(state.exp_avg)):
        raise ValidationError("params, grads and state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g.shape != p.shape:
            raise ValidationError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / c1)


def cosine_lr(step: int, total: int, lr0: float = 1e-4, lr1: float = 1e-6) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr1`` at ``total``."""
    if step < 0:
        raise ValidationError("step must be non-negative")
    if total <= 0:
        return lr0
    t = min(step, total) / total
    return lr1 + (lr0 - lr1) * (1.0 + math.cos(math.pi * t)) / 2.0
