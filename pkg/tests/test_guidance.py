import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as nph

from vtryon.errors import ValidationError
from vtryon.guidance import AttentionRecord, aggregate_attention, attention_iou, rasg_loss, total_loss

from oracles import loop_rasg


def test_perfect_alignment_is_zero():
    m = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert rasg_loss([AttentionRecord("l", 0, m.clone())], m[None], 0.5).item() == 0.0


def test_hand_worked_2x2():
    m = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
    a = torch.tensor([[0.5, 0.5], [0.0, 0.0]], dtype=torch.float64)
    got = rasg_loss([AttentionRecord("l", 0, a)], m, 0.5).item()
    assert got == pytest.approx(0.25 + 0.5 * 0.25 / 3, rel=1e-12)
    assert got == pytest.approx(loop_rasg([a.numpy()], m.numpy(), 0.5), rel=1e-12)


def test_all_edit_mask_has_no_rest_term():
    a = torch.rand(3, 3, dtype=torch.float64)
    got = rasg_loss([AttentionRecord("l", 0, a)], torch.ones(1, 3, 3), 0.9).item()
    assert got == pytest.approx(((1 - a) ** 2).mean().item(), rel=1e-12)


def test_masks_resampled_nearest(rng):
    mask = torch.zeros(1, 8, 8)
    mask[0, :4, :4] = 1
    a = torch.from_numpy(rng.uniform(size=(4, 4)))
    small = np.zeros((4, 4))
    small[:2, :2] = 1
    got = rasg_loss([AttentionRecord("l", 0, a)], mask, 0.3).item()
    assert got == pytest.approx(loop_rasg([a.numpy()], [small], 0.3), rel=1e-12)
    with pytest.raises(ValidationError):
        rasg_loss([AttentionRecord("l", 0, torch.rand(4, 2))], mask, 0.3)


def test_batched_records_match_loop(rng):
    for _ in range(20):
        maps = rng.uniform(size=(3, 4, 3))
        masks = (rng.uniform(size=(3, 4, 3)) > 0.6).astype(float)
        rec = [AttentionRecord("a", None, torch.from_numpy(maps)), AttentionRecord("b", 1, torch.from_numpy(maps[0]))]
        expected = (3 * loop_rasg(maps, masks, 0.7) + loop_rasg([maps[0]], [masks[1]], 0.7)) / 4
        assert rasg_loss(rec, torch.from_numpy(masks), 0.7).item() == pytest.approx(expected, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(a=nph.arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
       m=nph.arrays(np.float64, (3, 4), elements=st.sampled_from([0.0, 1.0])),
       lam=st.floats(0.01, 2.0))
def test_nonnegative_and_monotone(a, m, lam):
    rec = lambda x: [AttentionRecord("l", 0, torch.from_numpy(x))]
    masks = torch.from_numpy(m)[None]
    base = rasg_loss(rec(a), masks, lam).item()
    assert base >= 0
    rest = np.argwhere(m == 0)
    if len(rest):
        i, j = rest[0]
        if a[i, j] < 0.99:
            b = a.copy()
            b[i, j] += 0.01
            assert rasg_loss(rec(b), masks, lam).item() > base
    edit = np.argwhere(m == 1)
    if len(edit):
        i, j = edit[0]
        if a[i, j] < 0.99:
            b = a.copy()
            b[i, j] += 0.01
            assert rasg_loss(rec(b), masks, lam).item() < base


def test_gradient_matches_central_differences(rng):
    a = torch.from_numpy(rng.uniform(0.05, 0.95, size=(2, 3, 4))).requires_grad_()
    masks = torch.from_numpy((rng.uniform(size=(2, 3, 4)) > 0.5).astype(float))
    rasg_loss([AttentionRecord("l", None, a)], masks, 0.5).backward()
    h = 1e-5
    base = a.detach().numpy()
    num = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        for sign in (1, -1):
            x = base.copy()
            x[idx] += sign * h
            num[idx] += sign * loop_rasg(x, masks.numpy(), 0.5) / (2 * h)
    np.testing.assert_allclose(a.grad.numpy(), num, rtol=1e-4, atol=1e-9)


def test_total_loss():
    assert total_loss(1.3, 0.7, 0.0) == 1.3
    assert total_loss(1.0, 0.5, 0.1) == pytest.approx(1.05, rel=1e-15)


def test_aggregate_attention_cases():
    raw = torch.zeros(1, 4, 6)
    raw[..., 4:] = 0.5
    assert torch.equal(aggregate_attention(raw, [4, 5], (2, 2)).probs, torch.ones(2, 2))
    assert torch.equal(aggregate_attention(raw, [0, 1], (2, 2)).probs, torch.zeros(2, 2))
    two = torch.zeros(2, 1, 4)
    two[0, 0] = torch.tensor([0.2, 0.0, 0.8, 0.0])
    two[1, 0] = torch.tensor([0.6, 0.0, 0.0, 0.4])
    assert aggregate_attention(two, [0], (1, 1)).probs.item() == pytest.approx(0.4)


def test_aggregate_attention_against_loop(rng):
    for _ in range(10):
        logits = rng.normal(size=(3, 6, 5))
        raw = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        keys = [1, 3]
        got = aggregate_attention(torch.from_numpy(raw), keys, (2, 3)).probs.numpy().ravel()
        for q in range(6):
            expect = sum(raw[h, q, k] for h in range(3) for k in keys) / 3
            assert got[q] == pytest.approx(expect, rel=1e-12)


def test_aggregate_attention_rejects_bad_rows():
    with pytest.raises(ValidationError):
        aggregate_attention(torch.full((1, 2, 3), 0.5), [0], (1, 2))
    with pytest.raises(ValidationError):
        aggregate_attention(torch.full((1, 2, 2), 0.5), [], (1, 2))


def test_attention_iou():
    m = torch.zeros(1, 2, 2)
    m[0, 0] = 1
    perfect = AttentionRecord("l", 0, torch.tensor([[0.9, 0.8], [0.1, 0.2]]))
    half = AttentionRecord("l", 0, torch.tensor([[0.9, 0.1], [0.1, 0.2]]))
    assert attention_iou([perfect], m) == 1.0
    assert attention_iou([half], m) == 0.5
