"""Pose injection and weight-shared garment/pose cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, ValidationError
from .temporal import scaled_dot_attention

SOURCES = ("garment", "pose")


@dataclass
class GlobalEmbedding:
    tokens: torch.Tensor  # (B, T_e, D_e)
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"embedding source must be one of {SOURCES}, got {self.source!r}")
        if self.tokens.ndim == 2:
            self.tokens = self.tokens.unsqueeze(0)


class PoseEmbedding(nn.Module):
    """Four conv layers taking a pose map to the latent grid; the last layer starts at zero.

    The first log2(factor) layers have stride 2, the rest stride 1.
    """

    def __init__(self, pose_channels: int = 3, latent_channels: int = 4, factor: int = 8, widths=(16, 32, 64)):
        super().__init__()
        strides = int(math.log2(factor))
        if 2**strides != factor or strides > 3:
            raise ConfigurationError(f"pose downsampling factor must be 1, 2, 4 or 8, got {factor}")
        self.factor = factor
        chans = (pose_channels, *widths)
        layers = []
        for i in range(3):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2 if i < strides else 1, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(widths[-1], latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_p: torch.Tensor) -> torch.Tensor:
        if x_p.shape[-1] % self.factor or x_p.shape[-2] % self.factor:
            raise ValidationError(f"pose map {tuple(x_p.shape[-2:])} not divisible by {self.factor}")
        return self.out(self.body(x_p))


def pose_embed(x_p: torch.Tensor, module: PoseEmbedding) -> torch.Tensor:
    return module(x_p)


def inject_pose(z0: torch.Tensor, e_p: torch.Tensor) -> torch.Tensor:
    if z0.shape != e_p.shape:
        raise ValidationError(f"pose feature {tuple(e_p.shape)} does not match latent {tuple(z0.shape)}")
    return z0 + e_p


class GlobalEncoder(nn.Module):
    """Small conv encoder producing a (T_e, D_e) token sequence; stand-in for a frozen image encoder."""

    def __init__(self, in_channels: int, image_size, tokens: int = 4, dim: int = 64, widths=(16, 32, 64)):
        super().__init__()
        self.image_size = tuple(image_size)
        self.grid = _token_grid(tokens)
        chans = (in_channels, *widths)
        layers = []
        for i in range(3):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(self.grid)
        self.proj = nn.Linear(widths[-1], dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.image_size:
            raise ValidationError(f"global encoder expects {self.image_size} inputs, got {tuple(x.shape[-2:])}")
        h = self.pool(self.body(x)).flatten(2).transpose(1, 2)
        return self.norm(self.proj(h))


def _token_grid(tokens: int) -> tuple[int, int]:
    h = int(math.isqrt(tokens))
    while tokens % h:
        h -= 1
    return h, tokens // h


def encode_global(x: torch.Tensor, encoder: GlobalEncoder, source: str) -> GlobalEmbedding:
    return GlobalEmbedding(encoder(x), source)


class SharedAttentionWeights(nn.Module):
    """W_Q, W_K, W_V used by both branches' cross-attention. One instance, never copied."""

    def __init__(self, latent_dim: int, embed_dim: int, attn_dim: int, head_dim: int = 16):
        super().__init__()
        if attn_dim % head_dim:
            raise ConfigurationError(f"head_dim={head_dim} must divide attention dim {attn_dim}")
        self.heads = attn_dim // head_dim
        self.latent_dim, self.embed_dim = latent_dim, embed_dim
        self.w_q = nn.Linear(latent_dim, attn_dim, bias=False)
        self.w_k = nn.Linear(embed_dim, attn_dim, bias=False)
        self.w_v = nn.Linear(embed_dim, attn_dim, bias=False)

    def same_storage(self, other: "SharedAttentionWeights") -> bool:
        return all(a is b for a, b in zip(self.parameters(), other.parameters()))


def _gated_cross_attention(z: torch.Tensor, emb: GlobalEmbedding, W: SharedAttentionWeights,
                           out_proj: nn.Module | None, return_probs: bool):
    if z.shape[-1] != W.latent_dim:
        raise ValidationError(f"latent tokens have dim {z.shape[-1]}, weights expect {W.latent_dim}")
    if emb.tokens.shape[-1] != W.embed_dim:
        raise ValidationError(f"embedding dim {emb.tokens.shape[-1]} != weights' {W.embed_dim}")
    if emb.tokens.shape[0] != z.shape[0]:
        raise ValidationError(f"{emb.tokens.shape[0]} embeddings for {z.shape[0]} latent sequences")
    out, probs = scaled_dot_attention(W.w_q(z), W.w_k(emb.tokens), W.w_v(emb.tokens), W.heads, return_probs=True)
    if out_proj is not None:
        out = out_proj(out)
    res = z + out
    return (res, probs) if return_probs else res


def reference_cross_attention(z_R: torch.Tensor, f_g: GlobalEmbedding, W: SharedAttentionWeights,
                              out_proj: nn.Module | None = None, return_probs: bool = False):
    """z_R + out(softmax(z_R W_Q (f_g W_K)^T / sqrt(d)) f_g W_V). Tokens are (B, L, C)."""
    if f_g.source != "garment":
        raise ValidationError(f"reference branch attends to garment embeddings, got {f_g.source!r}")
    return _gated_cross_attention(z_R, f_g, W, out_proj, return_probs)


def denoising_cross_attention(z_D: torch.Tensor, f_p: GlobalEmbedding, W: SharedAttentionWeights,
                              out_proj: nn.Module | None = None, reference_weights: SharedAttentionWeights | None = None,
                              return_probs: bool = False):
    """Same attention as the reference branch with pose tokens; W must be the reference branch's W."""
    if f_p.source != "pose":
        raise ValidationError(f"denoising branch attends to pose embeddings, got {f_p.source!r}")
    if reference_weights is not None and not (W is reference_weights or W.same_storage(reference_weights)):
        raise ConfigurationError("denoising cross-attention weights are not shared with the reference branch")
    return _gated_cross_attention(z_D, f_p, W, out_proj, return_probs)


class AlignmentCrossAttention(nn.Module):
    """Branch-side wrapper: pre-norm, shared projections, private zero-init output projection."""

    def __init__(self, weights: SharedAttentionWeights, channels: int, source: str):
        super().__init__()
        if source not in SOURCES:
            raise ValidationError(f"unknown embedding source {source!r}")
        self.source = source
        self.weights = weights
        self.norm = nn.LayerNorm(channels)
        self.out = nn.Linear(weights.w_q.out_features, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self._partner: list[AlignmentCrossAttention] = []

    def pair_with(self, reference: "AlignmentCrossAttention") -> None:
        self._partner = [reference]

    def forward(self, x: torch.Tensor, emb: GlobalEmbedding) -> torch.Tensor:
        """x: (B, C, H, W) feature map; returns the same shape."""
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        normed = self.norm(tokens)
        if self.source == "garment":
            delta = reference_cross_attention(normed, emb, self.weights, self.out) - normed
        else:
            ref = self._partner[0].weights if self._partner else None
            delta = denoising_cross_attention(normed, emb, self.weights, self.out, reference_weights=ref) - normed
        return x + delta.transpose(1, 2).reshape(b, c, h, w)
