"""Mask-guided attention loss on garment attention maps (training only)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class AttentionRecord:
    """Garment-attention probability maps captured from one layer.

    `probs` is (H, W) for a single frame, or (F, H, W) for a stack of frames;
    `frame_index` then is an int or a sequence of F indices into the mask stack.
    """

    layer_id: str
    frame_index: int | Sequence[int] | None
    probs: torch.Tensor

    def frames(self) -> list[int]:
        if self.probs.ndim == 2:
            return [int(self.frame_index or 0)]
        if self.frame_index is None:
            return list(range(self.probs.shape[0]))
        return [int(i) for i in self.frame_index]


@dataclass
class AttentionRecorder:
    """Collects records during one forward pass. Owned by the caller."""

    layers: Sequence[str] | None = None
    records: list[AttentionRecord] = field(default_factory=list)

    def wants(self, layer_id: str) -> bool:
        return self.layers is None or layer_id in self.layers

    def add(self, record: AttentionRecord) -> None:
        self.records.append(record)


def check_row_stochastic(raw: torch.Tensor, tol: float = 1e-5) -> None:
    err = (raw.sum(dim=-1) - 1.0).abs().max().item() if raw.numel() else 0.0
    if err > tol or (raw.numel() and raw.min().item() < -tol):
        raise ValidationError(f"attention rows are not stochastic (max |row sum - 1| = {err:.3g})")


def garment_mass(raw: torch.Tensor, garment_keys) -> torch.Tensor:
    """Attention mass on garment keys, averaged over heads.

    raw: (..., heads, queries, keys) -> (..., queries). Unvalidated hot path.
    """
    return raw[..., garment_keys].sum(dim=-1).mean(dim=-2)


def aggregate_attention(raw: torch.Tensor, garment_keys, spatial_shape, layer_id: str = "",
                        frame_index: int = 0) -> AttentionRecord:
    """Reduce a (heads, queries, keys) or (queries, keys) attention matrix to a garment map."""
    if raw.ndim == 2:
        raw = raw.unsqueeze(0)
    if raw.ndim != 3:
        raise ValidationError(f"expected (heads, queries, keys), got shape {tuple(raw.shape)}")
    keys = torch.as_tensor(garment_keys, dtype=torch.long).flatten()
    if keys.numel() == 0:
        raise ValidationError("garment key index set is empty")
    if keys.min() < 0 or keys.max() >= raw.shape[-1]:
        raise ValidationError("garment key index out of range")
    check_row_stochastic(raw)
    h, w = spatial_shape
    if h * w != raw.shape[-2]:
        raise ValidationError(f"{raw.shape[-2]} queries cannot be shaped to {h}x{w}")
    probs = garment_mass(raw, keys).reshape(h, w)
    return AttentionRecord(layer_id, frame_index, probs)


def resample_masks(masks: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resampling of (F, H, W) binary masks to `size`."""
    hm, wm = masks.shape[-2:]
    ha, wa = size
    if hm * wa != wm * ha:
        raise ValidationError(f"mask {hm}x{wm} and attention map {ha}x{wa} have different aspect ratios")
    if (hm, wm) == (ha, wa):
        return masks
    out = F.interpolate(masks.unsqueeze(1).to(torch.float64), size=(ha, wa), mode="nearest")
    return out.squeeze(1).to(masks.dtype)


def _region_terms(probs: torch.Tensor, mask: torch.Tensor):
    m = mask.to(probs.dtype)
    edit_n = m.flatten(-2).sum(-1)
    rest_n = (1 - m).flatten(-2).sum(-1)
    edit = (m * (1 - probs) ** 2).flatten(-2).sum(-1) / edit_n.clamp(min=1)
    rest = ((1 - m) * probs**2).flatten(-2).sum(-1) / rest_n.clamp(min=1)
    return edit, rest


def rasg_loss(records: Sequence[AttentionRecord], masks: torch.Tensor, lambda_n: float = 0.5) -> torch.Tensor:
    """Mean over (record, frame) of  mean_edit (1-A)^2 + lambda_n * mean_rest A^2.

    masks: (F, H, W) binary, indexed by each record's frame indices.
    """
    if lambda_n < 0:
        raise ValidationError(f"lambda_n must be >= 0, got {lambda_n}")
    if not records:
        raise ValidationError("no attention records to supervise")
    if masks.ndim == 2:
        masks = masks.unsqueeze(0)
    terms = []
    for rec in records:
        probs = rec.probs if rec.probs.ndim == 3 else rec.probs.unsqueeze(0)
        idx = rec.frames()
        if len(idx) != probs.shape[0]:
            raise ValidationError(f"record {rec.layer_id!r}: {len(idx)} frame indices for {probs.shape[0]} maps")
        if max(idx) >= masks.shape[0]:
            raise ValidationError(f"record {rec.layer_id!r} references frame {max(idx)} without a mask")
        m = resample_masks(masks[idx], probs.shape[-2:])
        edit, rest = _region_terms(probs, m)
        terms.append(edit + lambda_n * rest)
    return torch.cat(terms).mean()


def total_loss(l_ldm, l_rasg, lambda_r: float):
    return l_ldm + lambda_r * l_rasg


@torch.no_grad()
def attention_iou(records: Sequence[AttentionRecord], masks: torch.Tensor, threshold: float = 0.5) -> float:
    """Mean IoU between thresholded garment-attention maps and the masks."""
    if masks.ndim == 2:
        masks = masks.unsqueeze(0)
    ious = []
    for rec in records:
        probs = rec.probs if rec.probs.ndim == 3 else rec.probs.unsqueeze(0)
        m = resample_masks(masks[rec.frames()], probs.shape[-2:]) > 0.5
        pred = probs > threshold
        inter = (pred & m).flatten(1).sum(1).double()
        union = (pred | m).flatten(1).sum(1).double()
        ious.append(torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union)))
    return torch.cat(ious).mean().item()
