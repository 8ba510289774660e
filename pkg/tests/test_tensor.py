import math

import numpy as np
import pytest
import torch

from contrastforge.errors import ValidationError
from contrastforge.tensor import (
    AdamState,
    adam_step,
    backward,
    blurpool3d,
    conv3d,
    cosine_lr,
    linear,
    pointwise,
    relu,
    silu,
    upsample_trilinear,
)


def naive_conv(x, k, bias, pad):
    n, cin, D, H, W = x.shape
    cout, _, kd, kh, kw = k.shape
    xp = np.zeros((n, cin, D + 2 * pad, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + D, pad:pad + H, pad:pad + W] = x
    od, oh, ow = D + 2 * pad - kd + 1, H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    out = np.zeros((n, cout, od, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = bias[o]
                        for c in range(cin):
                            acc += np.sum(xp[b, c, i:i + kd, j:j + kh, l:l + kw] * k[o, c])
                        out[b, o, i, j, l] = acc
    return out


def test_conv3d_matches_naive_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4, 6))
    k = rng.normal(size=(2, 3, 3, 3, 3))
    b = rng.normal(size=2)
    got = conv3d(torch.tensor(x), torch.tensor(k), torch.tensor(b)).numpy()
    np.testing.assert_allclose(got, naive_conv(x, k, b, 1), rtol=1e-10, atol=1e-10)


def test_conv3d_pointwise_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 3, 3, 3))
    k = rng.normal(size=(5, 4, 1, 1, 1))
    got = conv3d(torch.tensor(x), torch.tensor(k)).numpy()
    np.testing.assert_allclose(got, np.einsum("oc,ncdhw->nodhw", k[:, :, 0, 0, 0], x), rtol=1e-10)


def test_conv3d_shape_errors():
    with pytest.raises(ValidationError):
        conv3d(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 3, 3, 3, 3))
    with pytest.raises(ValidationError):
        conv3d(torch.zeros(2, 4, 4, 4), torch.zeros(1, 2, 3, 3, 3))


def naive_blurpool(x):
    taps = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16
    kernel = taps[:, None, None] * taps[None, :, None] * taps[None, None, :]
    n, c, D, H, W = x.shape
    out = np.zeros((n, c, (D + 1) // 2, (H + 1) // 2, (W + 1) // 2))
    for b in range(n):
        for ch in range(c):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    for l in range(out.shape[4]):
                        acc = 0.0
                        for a in range(5):
                            for bb in range(5):
                                for cc in range(5):
                                    # replicate padding clamps the source index
                                    si = min(max(2 * i + a - 2, 0), D - 1)
                                    sj = min(max(2 * j + bb - 2, 0), H - 1)
                                    sl = min(max(2 * l + cc - 2, 0), W - 1)
                                    acc += kernel[a, bb, cc] * x[b, ch, si, sj, sl]
                        out[b, ch, i, j, l] = acc
    return out


@pytest.mark.parametrize("shape", [(1, 2, 8, 8, 8), (2, 1, 6, 4, 10), (1, 1, 5, 7, 3)])
def test_blurpool_matches_naive(shape):
    x = np.random.default_rng(2).normal(size=shape)
    got = blurpool3d(torch.tensor(x)).numpy()
    np.testing.assert_allclose(got, naive_blurpool(x), rtol=1e-10, atol=1e-12)


def test_blurpool_preserves_constant():
    out = blurpool3d(torch.full((1, 3, 8, 8, 8), 2.5, dtype=torch.float64))
    assert out.shape == (1, 3, 4, 4, 4)
    torch.testing.assert_close(out, torch.full_like(out, 2.5))


def naive_upsample_1d(v):
    """Half-pixel-centre linear interpolation with clamped edges, factor 2."""
    n = len(v)
    out = []
    for j in range(2 * n):
        src = max((j + 0.5) / 2 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        out.append((1 - t) * v[i0] + t * v[i1])
    return np.array(out)


def test_upsample_separable_against_naive():
    rng = np.random.default_rng(3)
    a, b, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=2)
    x = np.einsum("i,j,k->ijk", a, b, c)[None, None]
    got = upsample_trilinear(torch.tensor(x)).numpy()[0, 0]
    ref = np.einsum("i,j,k->ijk", naive_upsample_1d(a), naive_upsample_1d(b), naive_upsample_1d(c))
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_activations():
    x = torch.tensor([-2.0, 0.0, 3.0], dtype=torch.float64)
    torch.testing.assert_close(silu(x), x / (1 + torch.exp(-x)))
    torch.testing.assert_close(relu(x), torch.tensor([0.0, 0.0, 3.0], dtype=torch.float64))
    torch.testing.assert_close(pointwise(x, "sigmoid"), 1 / (1 + torch.exp(-x)))
    with pytest.raises(ValidationError):
        pointwise(x, "tanh")


def test_relu_gradient_passes_at_zero():
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    relu(x).sum().backward()
    assert torch.all(x.grad == 1.0)


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("op", ["conv", "blur", "up", "silu", "linear"])
def test_gradients_against_finite_differences(op):
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(1, 2, 4, 4, 4))
    k = torch.tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    W = torch.tensor(rng.normal(size=(3, 4)))
    probe = rng.normal(size=64)

    def fwd(t):
        if op == "conv":
            y = conv3d(t, k)
        elif op == "blur":
            y = blurpool3d(t)
        elif op == "up":
            y = upsample_trilinear(t)
        elif op == "silu":
            y = silu(t)
        else:
            y = linear(t, W)
        flat = y.reshape(-1)
        return (flat * torch.tensor(np.resize(probe, flat.numel()))).sum()

    x = torch.tensor(x0, requires_grad=True)
    loss = fwd(x)
    backward(loss, [x])
    numeric = central_difference(lambda a: fwd(torch.tensor(a)).item(), x0.copy())
    np.testing.assert_allclose(x.grad.numpy(), numeric, rtol=1e-6, atol=1e-8)


def test_backward_accumulates_and_zero_fills():
    a = torch.tensor([1.0, 2.0], requires_grad=True)
    unused = torch.tensor([5.0], requires_grad=True)
    backward((a * a).sum(), [a, unused])
    backward((a * a).sum(), [a, unused])
    torch.testing.assert_close(a.grad, torch.tensor([4.0, 8.0]))
    torch.testing.assert_close(unused.grad, torch.tensor([0.0]))


def test_backward_needs_scalar():
    a = torch.ones(3, requires_grad=True)
    with pytest.raises(ValidationError):
        backward(a * 2, [a])


def naive_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_scalar_recursion():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    p = torch.tensor([1.5], dtype=torch.float64)
    state = AdamState.zeros_like([p])
    for g in grads:
        adam_step([p], [torch.tensor([g], dtype=torch.float64)], state, lr=0.01)
    assert p.item() == pytest.approx(naive_adam(1.5, grads, 0.01), rel=1e-12)
    assert state.step == 5


def test_adam_first_step_is_lr_sign():
    p = torch.tensor([0.0, 0.0], dtype=torch.float64)
    state = AdamState.zeros_like([p])
    adam_step([p], [torch.tensor([3.0, -0.001], dtype=torch.float64)], state, lr=0.1)
    torch.testing.assert_close(p, torch.tensor([-0.1, 0.1], dtype=torch.float64), rtol=1e-4, atol=0)


def test_adam_length_mismatch():
    p = torch.zeros(2)
    with pytest.raises(ValidationError):
        adam_step([p], [], AdamState.zeros_like([p]), lr=0.1)


def test_cosine_schedule_values():
    assert cosine_lr(0, 2000) == pytest.approx(1e-4)
    assert cosine_lr(1000, 2000) == pytest.approx((1e-4 + 1e-6) / 2)
    assert cosine_lr(2000, 2000) == pytest.approx(1e-6)
    assert cosine_lr(5000, 2000) == pytest.approx(1e-6)
    assert cosine_lr(500, 2000) == pytest.approx(1e-6 + (1e-4 - 1e-6) * (1 + math.cos(math.pi / 4)) / 2)
    assert cosine_lr(3, 0) == 1e-4


def test_cosine_schedule_monotone():
    values = [cosine_lr(s, 100) for s in range(101)]
    assert all(a >= b for a, b in zip(values, values[1:]))
