import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from vtryon.errors import ValidationError
from vtryon.garment import MultiScaleGarmentFeatures, Standardize, ToyAutoencoder, adaptive_fuse, standardize

from oracles import central_diff


def loop_unshuffle(x, r):
    c, h, w = x.shape
    out = np.zeros((c * r * r, h // r, w // r))
    for ch in range(c):
        for dy in range(r):
            for dx in range(r):
                for y in range(h // r):
                    for xx in range(w // r):
                        out[ch * r * r + dy * r + dx, y, xx] = x[ch, y * r + dy, xx * r + dx]
    return out


def loop_groupnorm(x, groups, eps=1e-5):
    c = x.shape[0]
    per = c // groups
    out = np.empty_like(x)
    for g in range(groups):
        block = x[g * per:(g + 1) * per]
        vals = block.ravel().tolist()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[g * per:(g + 1) * per] = (block - mu) / math.sqrt(var + eps)
    return out


def silu(x):
    return x / (1 + np.exp(-x))


def test_level3_is_shape_preserving():
    s = Standardize(4, 3, 4)
    x = torch.randn(2, 4, 8, 6)
    assert s(x).shape == x.shape
    assert s.factor == 1


def test_level1_shape_arithmetic():
    s = Standardize(4, 1, 8)
    assert s.mix.in_channels == 64
    assert standardize(torch.randn(1, 4, 32, 24), 1, s).shape == (1, 8, 8, 6)
    with pytest.raises(ValidationError):
        s(torch.randn(1, 4, 30, 24))
    with pytest.raises(ValidationError):
        standardize(torch.randn(1, 4, 32, 24), 2, s)


def test_standardize_against_loop(rng):
    s = Standardize(2, 2, 4, num_groups=2).double()
    with torch.no_grad():
        s.mix.weight.zero_()
        s.mix.bias.zero_()
        for o in range(4):
            s.mix.weight[o, 2 * o, 0, 0] = 1.0  # delta kernel: output o copies unshuffled channel 2o
    for _ in range(5):
        x = rng.normal(size=(2, 4, 6))
        got = s(torch.from_numpy(x)[None])[0].detach().numpy()
        un = loop_unshuffle(x, 2)
        ref = silu(loop_groupnorm(un[[0, 2, 4, 6]], 2))
        np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9)


def _delta_conv(c, k):
    conv = nn.Conv2d(c, c, k, padding=k // 2).double()
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        for i in range(c):
            conv.weight[i, i, k // 2, k // 2] = 1.0
    return conv


def test_adaptive_fuse_cases(rng):
    c = 3
    f = [torch.from_numpy(rng.normal(size=(1, c, 4, 3))) for _ in range(3)]
    local, glob = nn.Conv2d(c, c, 3, padding=1).double(), nn.Conv2d(c, c, 7, padding=3).double()
    nn.init.zeros_(local.bias)
    nn.init.zeros_(glob.bias)
    alpha = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    assert torch.equal(adaptive_fuse(*f, alpha, local, glob), f[2])
    zeros = [torch.zeros_like(x) for x in f]
    assert torch.all(adaptive_fuse(*zeros, torch.tensor([0.3, -1.2, 0.7], dtype=torch.float64), local, glob) == 0)
    with pytest.raises(ValidationError):
        adaptive_fuse(f[0], f[1][..., :2], f[2], alpha, local, glob)


def test_adaptive_fuse_delta_kernels_loop(rng):
    c = 2
    local, glob = _delta_conv(c, 3), _delta_conv(c, 7)
    alpha = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
    for _ in range(10):
        f = [rng.normal(size=(1, c, 4, 3)) for _ in range(3)]
        got = adaptive_fuse(*map(torch.from_numpy, f), alpha, local, glob).detach().numpy()
        ref = np.zeros_like(f[0])
        for idx in np.ndindex(*ref.shape):
            ref[idx] = 0.2 * f[0][idx] + 0.3 * f[1][idx] + 0.5 * f[2][idx]
        np.testing.assert_allclose(got, ref, rtol=1e-6)


def test_adaptive_fuse_gradients(rng):
    torch.manual_seed(0)
    c = 2
    local = nn.Conv2d(c, c, 3, padding=1).double()
    glob = nn.Conv2d(c, c, 7, padding=3).double()
    f = [torch.from_numpy(rng.normal(size=(1, c, 3, 3))).requires_grad_() for _ in range(3)]
    alpha = torch.tensor([0.4, -0.7, 1.1], dtype=torch.float64, requires_grad=True)
    probe = torch.from_numpy(rng.normal(size=(1, c, 3, 3)))
    out = adaptive_fuse(*f, alpha, local, glob)
    (out * probe).sum().backward()
    # d out / d alpha_l is the l-th branch output
    branches = [local(f[0]), glob(f[1]), f[2]]
    for l in range(3):
        assert alpha.grad[l].item() == pytest.approx((branches[l] * probe).sum().item(), rel=1e-10)
    num_alpha = central_diff(lambda a: (adaptive_fuse(*f, a, local, glob) * probe).sum(), alpha.detach())
    np.testing.assert_allclose(alpha.grad.numpy(), num_alpha.numpy(), rtol=1e-4)
    for l in range(3):
        def fn(x, l=l):
            args = [v.detach() for v in f]
            args[l] = x
            return (adaptive_fuse(*args, alpha.detach(), local, glob) * probe).sum()
        num = central_diff(fn, f[l].detach())
        np.testing.assert_allclose(f[l].grad.numpy(), num.numpy(), rtol=1e-4, atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(2, 4), w=st.integers(1, 4), lat=st.sampled_from([2, 4]))
def test_shape_closure(h, w, lat):
    ae = ToyAutoencoder(lat, (4, 4, 4))
    amfe = MultiScaleGarmentFeatures(ae.level_channels, lat)
    x = torch.rand(1, 3, 8 * h, 8 * w)
    f1, f2, f3 = ae.encode_pyramid(x)
    assert f3.shape == (1, lat, h, w)
    assert amfe(f1, f2, f3).shape == f3.shape
    assert all(s.shape == f3.shape for s in amfe.standardized(f1, f2, f3))


def test_init_equals_plain_latent():
    ae = ToyAutoencoder(4, (8, 8, 8))
    amfe = MultiScaleGarmentFeatures(ae.level_channels, 4)
    assert amfe.alpha.tolist() == [0.0, 0.0, 1.0]
    f = ae.encode_pyramid(torch.rand(2, 3, 32, 24))
    assert torch.equal(amfe(*f), f[2])


def test_autoencoder_shapes():
    ae = ToyAutoencoder(4, (8, 8, 8))
    x = torch.rand(2, 3, 64, 48)
    f1, f2, f3 = ae.encode_pyramid(x)
    assert f1.shape[-2:] == (32, 24) and f2.shape[-2:] == (16, 12) and f3.shape == (2, 4, 8, 6)
    y = ae.decode(f3)
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    with pytest.raises(ValidationError):
        ae.encode(torch.rand(1, 3, 60, 48))
