"""Temporal feature fusion across randomly paired frames of a clip.

Each frame z_i is fused with two other frames z_j, z_k using per-location
softmax scores, group-normalized, then used as keys/values of a cross
attention whose queries come from z_i itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ValidationError


@dataclass(frozen=True)
class AttentionConfig:
    d_k: int = 16
    num_groups: int = 8

    def check(self, channels: int) -> None:
        if self.d_k < 1 or channels % self.d_k:
            raise ConfigurationError(f"d_k={self.d_k} must divide channel count {channels}")
        if self.num_groups < 1 or channels % self.num_groups:
            raise ConfigurationError(f"num_groups={self.num_groups} must divide channel count {channels}")


class FusionWeights(NamedTuple):
    w_j: torch.Tensor
    w_k: torch.Tensor


def sample_frame_pair(i: int, n: int, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct partner frames for frame i, drawn uniformly from the rest of the clip."""
    if n < 1 or not 0 <= i < n:
        raise ValidationError(f"frame {i} not in clip of length {n}")
    if n == 1:
        return i, i
    if n == 2:
        return 1 - i, 1 - i
    others = [f for f in range(n) if f != i]
    j, k = rng.choice(others, size=2, replace=False)
    return int(j), int(k)


def sample_clip_pairs(n: int, rng: np.random.Generator) -> torch.Tensor:
    """(n, 2) partner indices, one row per frame."""
    return torch.tensor([sample_frame_pair(i, n, rng) for i in range(n)], dtype=torch.long).reshape(n, 2)


def fusion_weights(z_i: torch.Tensor, z_j: torch.Tensor, z_k: torch.Tensor) -> FusionWeights:
    """Softmax over the two channel-wise dot-product scores at every location.

    Inputs are (..., C, H, W); weights come back as (..., H, W).
    """
    if not (z_i.shape == z_j.shape == z_k.shape):
        raise ValidationError(f"shape mismatch: {tuple(z_i.shape)}, {tuple(z_j.shape)}, {tuple(z_k.shape)}")
    scores = torch.stack([(z_i * z_j).sum(dim=-3), (z_i * z_k).sum(dim=-3)], dim=0)
    w = scores.softmax(dim=0)
    return FusionWeights(w[0], w[1])


def fuse_temporal(z_i, z_j, z_k, w: FusionWeights, cfg: AttentionConfig,
                  weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    """GroupNorm(w_j * z_j + z_i + w_k * z_k) with per-frame group statistics."""
    if not (z_i.shape == z_j.shape == z_k.shape):
        raise ValidationError("fuse_temporal inputs must share one shape")
    single = z_i.ndim == 3
    if single:
        z_i, z_j, z_k = z_i[None], z_j[None], z_k[None]
        w = FusionWeights(w.w_j[None], w.w_k[None])
    if cfg.num_groups < 1 or z_i.shape[1] % cfg.num_groups:
        raise ConfigurationError(f"num_groups={cfg.num_groups} must divide {z_i.shape[1]} channels")
    pre = w.w_j.unsqueeze(-3) * z_j + z_i + w.w_k.unsqueeze(-3) * z_k
    out = F.group_norm(pre, cfg.num_groups, weight, bias, eps)
    return out[0] if single else out


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                         return_probs: bool = False):
    """Multi-head softmax(QK^T / sqrt(d_k)) V on (B, tokens, dim) inputs."""
    b, nq, dim = q.shape
    if k.shape[-1] != dim or v.shape[-1] != dim or k.shape[1] != v.shape[1]:
        raise ValidationError(f"attention dims disagree: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    if dim % heads:
        raise ValidationError(f"{heads} heads do not divide dimension {dim}")
    d_k = dim // heads

    def split(x):
        return x.reshape(x.shape[0], x.shape[1], heads, d_k).transpose(1, 2)

    probs = (split(q) @ split(k).transpose(-1, -2) / math.sqrt(d_k)).softmax(dim=-1)
    out = (probs @ split(v)).transpose(1, 2).reshape(b, nq, dim)
    return (out, probs) if return_probs else out


class CrossSpaceProjection(nn.Module):
    """Q/K/V projections shared by every frame of a clip, plus a zero-init output projection."""

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        cfg.check(channels)
        self.heads = channels // cfg.d_k
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)


def cross_space_attention(z_i: torch.Tensor, z_bar: torch.Tensor, proj: CrossSpaceProjection,
                          cfg: AttentionConfig, return_probs: bool = False):
    """z_i + out(Softmax(Q K̄^T / sqrt(d_k)) V̄), queries from z_i, keys/values from z̄.

    Both maps are (B, C, H, W) (or (C, H, W)); z̄ may have a different spatial size.
    """
    single = z_i.ndim == 3
    if single:
        z_i, z_bar = z_i[None], z_bar[None]
    b, c, h, w = z_i.shape
    if z_bar.shape[:2] != (b, c):
        raise ValidationError(f"query map {tuple(z_i.shape)} and key map {tuple(z_bar.shape)} disagree")
    cfg.check(c)
    q_tok = z_i.flatten(2).transpose(1, 2)
    kv_tok = z_bar.flatten(2).transpose(1, 2)
    attn, probs = scaled_dot_attention(proj.to_q(q_tok), proj.to_k(kv_tok), proj.to_v(kv_tok),
                                       heads=c // cfg.d_k, return_probs=True)
    out = z_i + proj.to_out(attn).transpose(1, 2).reshape(b, c, h, w)
    if single:
        out, probs = out[0], probs[0]
    return (out, probs) if return_probs else out


class TemporalFusion(nn.Module):
    """Frame-pair fusion block; identity at initialization."""

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        cfg.check(channels)
        self.cfg = cfg
        self.norm = nn.GroupNorm(cfg.num_groups, channels)
        self.proj = CrossSpaceProjection(channels, cfg)

    def forward(self, x: torch.Tensor, num_frames: int, pairs: torch.Tensor) -> torch.Tensor:
        """x: (B*N, C, H, W) frames grouped clip-major; pairs: (N, 2) partner indices."""
        bn, c, h, w = x.shape
        if bn % num_frames:
            raise ValidationError(f"{bn} frames is not a multiple of clip length {num_frames}")
        if tuple(pairs.shape) != (num_frames, 2):
            raise ValidationError(f"pairs must be ({num_frames}, 2), got {tuple(pairs.shape)}")
        clip = x.reshape(bn // num_frames, num_frames, c, h, w)
        z_j = clip[:, pairs[:, 0]].reshape(bn, c, h, w)
        z_k = clip[:, pairs[:, 1]].reshape(bn, c, h, w)
        wts = fusion_weights(x, z_j, z_k)
        z_bar = fuse_temporal(x, z_j, z_k, wts, self.cfg, self.norm.weight, self.norm.bias, self.norm.eps)
        return cross_space_attention(x, z_bar, self.proj, self.cfg)
