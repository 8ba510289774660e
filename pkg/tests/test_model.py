import numpy as np
import pytest
import torch

from contrastforge.errors import ValidationError
from contrastforge.model import (
    CRB,
    Conv,
    ConditionalUNet,
    Embedding,
    GatedFuse,
    ModelConfig,
    condition_vector,
    count_params,
    receptive_radius,
    unet_forward,
)
from contrastforge.volio import AcquisitionMeta


def randomize(module, seed=0, scale=0.3):
    """Overwrite every parameter, including the zero-initialized ones."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def test_embedding_zero_weights_give_bias():
    emb = Embedding(4, 8)
    with torch.no_grad():
        emb.fc1.weight.zero_()
        emb.fc2.weight.zero_()
        emb.fc2.bias.copy_(torch.arange(8.0))
    for c in ([0.3, 3.0, 4.5, 0.01], [1.0, 1.5, 3.9, 0.2]):
        torch.testing.assert_close(emb(torch.tensor([c])), torch.arange(8.0)[None])


def test_embedding_distinct_conditions():
    emb = randomize(Embedding(4, 128).double(), seed=1)
    e1 = emb(torch.tensor([[0.33, 3.0, 4.5, 0.02]], dtype=torch.float64))
    e2 = emb(torch.tensor([[0.10, 3.0, 4.5, 0.02]], dtype=torch.float64))
    assert torch.linalg.norm(e1 - e2) > 0


def test_embedding_rejects_wrong_dim():
    with pytest.raises(ValidationError):
        Embedding(4, 8)(torch.zeros(1, 3))


def test_embedding_gradient_finite_difference():
    emb = randomize(Embedding(4, 16).double(), seed=2)
    c = torch.tensor([[0.33, 3.0, 4.5, 0.02]], dtype=torch.float64)
    W = emb.fc1.weight
    (emb(c) ** 2).sum().backward()
    h = 1e-6
    for idx in [(0, 0), (3, 2), (15, 3)]:
        with torch.no_grad():
            W[idx] += h
            up = (emb(c) ** 2).sum().item()
            W[idx] -= 2 * h
            down = (emb(c) ** 2).sum().item()
            W[idx] += h
        assert W.grad[idx].item() == pytest.approx((up - down) / (2 * h), rel=1e-5)


def test_crb_zero_weights_identity():
    blk = CRB(3, 8)
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
    f = torch.randn(1, 3, 4, 4, 4)
    torch.testing.assert_close(blk(f, torch.randn(1, 8)), f)


def test_crb_embedding_bias_is_spatially_uniform():
    blk = CRB(2, 4)
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
        blk.proj.bias.copy_(torch.tensor([0.5, -1.0]))
        # conv_b reduced to a centre tap: 1x1x1 identity
        blk.conv_b.weight[0, 0, 1, 1, 1] = 1.0
        blk.conv_b.weight[1, 1, 1, 1, 1] = 1.0
    f = torch.randn(1, 2, 5, 5, 5)
    delta = blk(f, torch.zeros(1, 4)) - f
    silu = lambda v: v / (1 + np.exp(-v))
    torch.testing.assert_close(delta[0, 0], torch.full((5, 5, 5), silu(0.5)))
    torch.testing.assert_close(delta[0, 1], torch.full((5, 5, 5), silu(-1.0)))


@pytest.mark.parametrize("seed", range(10))
def test_crb_conditioning_is_live(seed):
    blk = randomize(CRB(3, 8).double(), seed=seed)
    g = torch.Generator().manual_seed(100 + seed)
    f = torch.randn(1, 3, 4, 4, 4, generator=g, dtype=torch.float64)
    e1 = torch.randn(1, 8, generator=g, dtype=torch.float64)
    e2 = e1 + 0.1
    assert torch.linalg.norm(blk(f, e1) - blk(f, e2)) > 0


def test_crb_channel_mismatch():
    with pytest.raises(ValidationError):
        CRB(3, 8)(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 8))


def test_gated_fuse_selection():
    fuse = GatedFuse(2).double()
    with torch.no_grad():
        for p in fuse.parameters():
            p.zero_()
        fuse.gate_u.bias.fill_(50.0)
        fuse.gate_s.bias.fill_(-50.0)
        fuse.w_u.weight[:, :, 0, 0, 0] = torch.eye(2)
        fuse.w_s.weight[:, :, 0, 0, 0] = torch.eye(2)
    f_u = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64)
    f_s = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(fuse(f_u, f_s), f_u, atol=1e-20, rtol=1e-15)


def test_gated_fuse_symmetric_branches():
    fuse = randomize(GatedFuse(3).double(), seed=3)
    with torch.no_grad():
        fuse.gate_s.weight.copy_(fuse.gate_u.weight)
        fuse.gate_s.bias.copy_(fuse.gate_u.bias)
        fuse.w_s.weight.copy_(fuse.w_u.weight)
        fuse.w_s.bias.copy_(fuse.w_u.bias)
    f = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64)
    both = torch.cat([f, f], 1)
    expected = 2 * torch.sigmoid(fuse.gate_u(both)) * fuse.w_u(f)
    torch.testing.assert_close(fuse(f, f), expected)


def test_gated_fuse_gradcheck():
    fuse = randomize(GatedFuse(2).double(), seed=4)
    f_u = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    f_s = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(fuse, (f_u, f_s), eps=1e-6, atol=1e-8, rtol=1e-5)


def test_gated_fuse_shape_mismatch():
    with pytest.raises(ValidationError):
        GatedFuse(2)(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 2, 2, 2, 4))


def test_untrained_model_predicts_zero():
    model = ConditionalUNet(ModelConfig(scales=3, base_channels=4))
    x = torch.randn(1, 3, 16, 16, 16)
    y = model(x, torch.tensor([[0.33, 3.0, 4.5, 0.02]]))
    assert torch.all(y == 0)


@pytest.mark.parametrize("seed", range(3))
def test_output_nonnegative(seed):
    model = randomize(ConditionalUNet(ModelConfig(scales=3, base_channels=4)), seed=seed, scale=1.0)
    y = model(torch.randn(2, 3, 8, 8, 8) * 5, torch.randn(2, 4))
    assert y.min() >= 0
    assert y.max() > 0


@pytest.mark.parametrize("n", [32, 48, 96])
def test_shape_preserved_four_scales(n):
    model = ConditionalUNet(ModelConfig(scales=4, base_channels=2, embed_dim=8))
    with torch.no_grad():
        y = model(torch.zeros(1, 3, n, n, n), torch.zeros(1, 4))
    assert y.shape == (1, 1, n, n, n)


def test_indivisible_dims_padded_and_cropped():
    model = randomize(ConditionalUNet(ModelConfig(scales=3, base_channels=2, embed_dim=8)), seed=5)
    with torch.no_grad():
        y = model(torch.randn(1, 3, 10, 13, 7), torch.zeros(1, 4))
    assert y.shape == (1, 1, 10, 13, 7)


def test_reduced_condition():
    cfg = ModelConfig(scales=2, base_channels=2, embed_dim=8, cond_dim=1)
    meta = AcquisitionMeta(0.33, 3.0, 4.5, noise_level=0.02)
    assert condition_vector(meta, cfg) == [0.02]
    assert condition_vector(meta, ModelConfig()) == [0.33, 3.0, 4.5, 0.02]
    with pytest.raises(ValidationError):
        condition_vector(AcquisitionMeta(0.33, 3.0, 4.5), cfg)


def test_unet_forward_stacks_channels():
    model = randomize(ConditionalUNet(ModelConfig(scales=2, base_channels=2, embed_dim=8)).double(), 6)
    vols = [np.random.default_rng(i).normal(size=(4, 4, 4)) for i in range(3)]
    c = torch.tensor([[0.3, 3.0, 4.5, 0.1]], dtype=torch.float64)
    y = unet_forward(*vols, c, model)
    direct = model(torch.tensor(np.stack(vols))[None], c)
    torch.testing.assert_close(y, direct)


def test_conditioning_changes_output():
    model = randomize(ConditionalUNet(ModelConfig(scales=2, base_channels=4, embed_dim=8)).double(), 7)
    x = torch.randn(1, 3, 8, 8, 8, dtype=torch.float64)
    y1 = model(x, torch.tensor([[0.33, 3.0, 4.5, 0.02]], dtype=torch.float64))
    y2 = model(x, torch.tensor([[0.10, 3.0, 4.5, 0.02]], dtype=torch.float64))
    assert torch.linalg.norm(y1 - y2) > 0


def test_full_model_gradient_check():
    model = randomize(ConditionalUNet(ModelConfig(scales=2, base_channels=4, embed_dim=16)).double(),
                      seed=8, scale=0.2)
    with torch.no_grad():
        model.out.bias.fill_(2.0)  # keep outputs clear of the ReLU kink
    g = torch.Generator().manual_seed(9)
    x = torch.randn(1, 3, 8, 8, 8, generator=g, dtype=torch.float64)
    c = torch.tensor([[0.33, 3.0, 4.5, 0.02]], dtype=torch.float64)
    probe = torch.randn(1, 1, 8, 8, 8, generator=g, dtype=torch.float64)
    params = list(model.parameters())

    def loss():
        return (model(x, c) * probe).sum()

    loss().backward()
    direction = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
    analytic = sum((p.grad * d).sum() for p, d in zip(params, direction)).item()
    h = 1e-6
    with torch.no_grad():
        for p, d in zip(params, direction):
            p += h * d
        up = loss().item()
        for p, d in zip(params, direction):
            p -= 2 * h * d
        down = loss().item()
        for p, d in zip(params, direction):
            p += h * d
    numeric = (up - down) / (2 * h)
    assert abs(analytic - numeric) <= 1e-4 * abs(numeric)


def conv_weight_count(model):
    return sum(m.weight.numel() for m in model.modules() if isinstance(m, Conv))


def test_doubling_channels_quadruples_conv_weights():
    small = conv_weight_count(ConditionalUNet(ModelConfig(scales=4, base_channels=16)))
    large = conv_weight_count(ConditionalUNet(ModelConfig(scales=4, base_channels=32)))
    assert large / small == pytest.approx(4.0, rel=0.05)


def test_count_params_single_scale_by_hand():
    cfg = ModelConfig(scales=1, base_channels=4, embed_dim=128, cond_dim=4)
    embedding = (4 * 128 + 128) + (128 * 128 + 128)
    inp = 4 * 3 * 27 + 4
    crb = 2 * (4 * 4 * 27 + 4) + (128 * 4 + 4)
    out = 1 * 4 * 27 + 1
    expected = embedding + inp + 2 * crb + out
    assert expected == 20365
    assert count_params(cfg) == expected
    model = ConditionalUNet(cfg)
    assert sum(p.numel() for p in model.parameters()) == expected


@pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig(scales=3, base_channels=8),
                                 ModelConfig(scales=2, base_channels=5, cond_dim=1, embed_dim=7)])
def test_count_params_matches_instance(cfg):
    model = ConditionalUNet(cfg)
    assert count_params(cfg) == sum(p.numel() for p in model.parameters())
    assert count_params(cfg) == count_params(cfg)


def test_locality_beyond_receptive_field():
    cfg = ModelConfig(scales=4, base_channels=2, embed_dim=4)
    radius = receptive_radius(cfg)
    n = radius + 16
    n += (-n) % cfg.divisor
    model = randomize(ConditionalUNet(cfg).double(), seed=10, scale=0.5)
    with torch.no_grad():
        model.out.bias.fill_(1.0)
    g = torch.Generator().manual_seed(11)
    x = torch.randn(1, 3, n, 8, 8, generator=g, dtype=torch.float64)
    c = torch.zeros(1, 4, dtype=torch.float64)
    x2 = x.clone()
    x2[0, :, 2, 4, 4] += 1.0
    with torch.no_grad():
        y1, y2 = model(x, c), model(x2, c)
    far = 2 + radius + 1
    assert far < n
    assert torch.equal(y1[..., far:, :, :], y2[..., far:, :, :])
    assert not torch.equal(y1[..., :far, :, :], y2[..., :far, :, :])
