import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vtryon.errors import ConfigurationError, ValidationError
from vtryon.temporal import (AttentionConfig, CrossSpaceProjection, FusionWeights, TemporalFusion,
                             cross_space_attention, fuse_temporal, fusion_weights, sample_clip_pairs,
                             sample_frame_pair)

from oracles import loop_fuse, loop_attention


def test_pair_degenerate_clips(rng):
    assert sample_frame_pair(0, 1, rng) == (0, 0)
    assert sample_frame_pair(0, 2, rng) == (1, 1)
    assert sample_frame_pair(1, 2, rng) == (0, 0)


def test_pair_is_reproducible_and_distinct():
    a = [sample_frame_pair(3, 8, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    rng = np.random.default_rng(0)
    for _ in range(200):
        j, k = sample_frame_pair(3, 8, rng)
        assert j != k and 3 not in (j, k) and 0 <= j < 8 and 0 <= k < 8


def test_pair_frequencies_uniform():
    rng = np.random.default_rng(42)
    draws = 10_000
    counts = np.zeros(8)
    for _ in range(draws):
        j, k = sample_frame_pair(0, 8, rng)
        counts[[j, k]] += 1
    assert counts[0] == 0
    p = 2 / 7
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts[1:] - draws * p) < 3 * sigma)


def test_fusion_weights_cases():
    z_i = torch.randn(4, 3, 2)
    z = torch.randn(4, 3, 2)
    w = fusion_weights(z_i, z, z.clone())
    assert torch.allclose(w.w_j, torch.full((3, 2), 0.5)) and torch.allclose(w.w_k, torch.full((3, 2), 0.5))
    z_i = torch.zeros(4, 1, 1, dtype=torch.float64)
    z_i[0] = 1.0
    z_j = torch.zeros_like(z_i)
    z_j[0] = math.log(2)
    w = fusion_weights(z_i, z_j, torch.zeros_like(z_i))
    assert w.w_j.item() == pytest.approx(2 / 3, rel=1e-12)
    assert w.w_k.item() == pytest.approx(1 / 3, rel=1e-12)
    orth_j, orth_k = torch.zeros_like(z_i), torch.zeros_like(z_i)
    orth_j[1], orth_k[2] = 3.0, -2.0
    w = fusion_weights(z_i, orth_j, orth_k)
    assert w.w_j.item() == 0.5 and w.w_k.item() == 0.5
    with pytest.raises(ValidationError):
        fusion_weights(z_i, z_j[:2], z_j)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fusion_weights_sum_to_one(seed):
    g = torch.Generator().manual_seed(seed)
    zs = [torch.randn(8, 3, 3, generator=g, dtype=torch.float64) for _ in range(3)]
    w = fusion_weights(*zs)
    assert torch.allclose(w.w_j + w.w_k, torch.ones(3, 3, dtype=torch.float64), atol=1e-12)
    assert torch.all((w.w_j >= 0) & (w.w_j <= 1))


def test_fuse_temporal_against_loop(rng):
    cfg = AttentionConfig(d_k=2, num_groups=2)
    for _ in range(10):
        zs = [rng.normal(size=(4, 3, 2)) for _ in range(3)]
        t = [torch.from_numpy(z) for z in zs]
        got = fuse_temporal(*t, fusion_weights(*t), cfg).numpy()
        np.testing.assert_allclose(got, loop_fuse(*zs, 2), rtol=1e-5, atol=1e-8)


def test_fuse_temporal_normalization_postconditions():
    cfg = AttentionConfig(d_k=2, num_groups=2)
    z = torch.randn(4, 3, 3, dtype=torch.float64)
    out = fuse_temporal(z, z, z, fusion_weights(z, z, z), cfg)
    groups = out.reshape(2, -1)
    assert torch.allclose(groups.mean(1), torch.zeros(2, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(groups.var(1, unbiased=False), torch.ones(2, dtype=torch.float64), atol=1e-3)
    const = torch.full((4, 3, 3), 2.5)
    out = fuse_temporal(const, const, const, fusion_weights(const, const, const), cfg)
    assert torch.all(out == 0)
    with pytest.raises(ConfigurationError):
        fuse_temporal(z, z, z, fusion_weights(z, z, z), AttentionConfig(d_k=2, num_groups=3))


def _random_proj(c, cfg, seed=0):
    torch.manual_seed(seed)
    proj = CrossSpaceProjection(c, cfg).double()
    torch.nn.init.normal_(proj.to_out.weight, std=0.3)
    return proj


def test_cross_space_attention_against_loop(rng):
    cfg = AttentionConfig(d_k=8, num_groups=8)
    proj = _random_proj(16, cfg)
    for _ in range(10):
        z_i = torch.from_numpy(rng.normal(size=(16, 2, 2)))
        z_bar = torch.from_numpy(rng.normal(size=(16, 2, 2)))
        got = cross_space_attention(z_i, z_bar, proj, cfg)
        qt = z_i.flatten(1).T.numpy()
        kt = z_bar.flatten(1).T.numpy()
        W = {n: getattr(proj, n).weight.detach().numpy() for n in ("to_q", "to_k", "to_v", "to_out")}
        att = loop_attention(qt @ W["to_q"].T, kt @ W["to_k"].T, kt @ W["to_v"].T, heads=2)
        ref = qt + att @ W["to_out"].T + proj.to_out.bias.detach().numpy()
        np.testing.assert_allclose(got.flatten(1).T.detach().numpy(), ref, rtol=1e-5, atol=1e-10)


def test_cross_space_attention_single_key_and_identity():
    cfg = AttentionConfig(d_k=4, num_groups=4)
    proj = _random_proj(8, cfg)
    z_i = torch.randn(8, 3, 2, dtype=torch.float64)
    z_bar = torch.randn(8, 1, 1, dtype=torch.float64)
    out, probs = cross_space_attention(z_i, z_bar, proj, cfg, return_probs=True)
    v = proj.to_v(z_bar.flatten(1).T)
    expected = z_i + proj.to_out(v).T.reshape(8, 1, 1)
    assert torch.allclose(out, expected, atol=1e-12)
    assert torch.all(probs == 1)
    fresh = CrossSpaceProjection(8, cfg).double()
    assert torch.equal(cross_space_attention(z_i, torch.randn(8, 3, 2, dtype=torch.float64), fresh, cfg), z_i)


def test_attention_rows_sum_to_one(rng):
    cfg = AttentionConfig(d_k=4, num_groups=4)
    proj = _random_proj(8, cfg)
    for _ in range(20):
        z_i = torch.from_numpy(rng.normal(size=(2, 8, 3, 3)) * 3)
        _, probs = cross_space_attention(z_i, torch.from_numpy(rng.normal(size=(2, 8, 3, 3)) * 3), proj, cfg, True)
        assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-5)


def test_block_identity_at_init_and_determinism():
    cfg = AttentionConfig(d_k=4, num_groups=4)
    block = TemporalFusion(8, cfg)
    x = torch.randn(2 * 5, 8, 3, 2)
    pairs = sample_clip_pairs(5, np.random.default_rng(0))
    assert torch.equal(block(x, 5, pairs), x)
    torch.nn.init.normal_(block.proj.to_out.weight)
    a = block(x, 5, sample_clip_pairs(5, np.random.default_rng(9)))
    b = block(x, 5, sample_clip_pairs(5, np.random.default_rng(9)))
    assert torch.equal(a, b)
    single = block(torch.randn(3, 8, 2, 2), 1, sample_clip_pairs(1, np.random.default_rng(0)))
    assert torch.isfinite(single).all()


def test_block_gradient_central_differences():
    torch.manual_seed(1)
    cfg = AttentionConfig(d_k=2, num_groups=2)
    block = TemporalFusion(4, cfg).double()
    torch.nn.init.normal_(block.proj.to_out.weight, std=0.5)
    pairs = sample_clip_pairs(3, np.random.default_rng(3))
    x = torch.randn(3, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    f = lambda inp: (block(inp, 3, pairs) * probe).sum()
    f(x).backward()
    h = 1e-5
    num = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[idx] += h
            xm[idx] -= h
            num[idx] = (f(xp) - f(xm)) / (2 * h)
    np.testing.assert_allclose(x.grad.numpy(), num.numpy(), rtol=1e-4, atol=1e-7)


def test_config_divisibility():
    with pytest.raises(ConfigurationError):
        AttentionConfig(d_k=3, num_groups=2).check(8)
    with pytest.raises(ValidationError):
        TemporalFusion(8, AttentionConfig(4, 4))(torch.randn(5, 8, 2, 2), 2, torch.zeros(2, 2, dtype=torch.long))
