"""Reference / denoising UNet pair and the deterministic sampler.

The reference branch encodes the fused garment feature; its normalized
attention inputs are appended as extra keys/values to the matching
self-attention layers of the denoising branch. The garment-attention mass
of those layers is what the mask-guidance loss supervises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .diffusion import NoiseSchedule
from .errors import ConfigurationError, StateError, ValidationError
from .garment import MultiScaleGarmentFeatures, ToyAutoencoder, default_groups
from .guidance import AttentionRecord, AttentionRecorder, garment_mass
from .pose import (AlignmentCrossAttention, GlobalEmbedding, GlobalEncoder, PoseEmbedding,
                   SharedAttentionWeights, inject_pose)
from .temporal import AttentionConfig, TemporalFusion, sample_clip_pairs


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


def grid_embedding(h: int, w: int, dim: int) -> torch.Tensor:
    """(h*w, dim) 2D sin/cos table: half the channels encode the row, half the column."""
    quarter = dim // 4
    freqs = math.pi * 2.0 ** torch.arange(quarter, dtype=torch.float32) / max(h, w)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float32), torch.arange(w, dtype=torch.float32),
                            indexing="ij")
    parts = []
    for coord in (ys.flatten(), xs.flatten()):
        a = (coord + 0.5)[:, None] * freqs[None]
        parts += [a.sin(), a.cos()]
    table = torch.cat(parts, dim=1)
    return F.pad(table, (0, dim - table.shape[1]))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int | None, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(default_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout) if time_dim else None
        self.norm2 = nn.GroupNorm(default_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time is not None:
            h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Self-attention over spatial tokens, optionally with reference tokens appended to the keys."""

    def __init__(self, channels: int, head_dim: int, layer_id: str, bank_only: bool = False):
        super().__init__()
        if channels % head_dim:
            raise ConfigurationError(f"head_dim={head_dim} does not divide {channels}")
        self.layer_id = layer_id
        self.heads = channels // head_dim
        self.norm = nn.LayerNorm(channels)
        self.bank_only = bank_only
        if bank_only:
            # last reference layer: its output feeds nothing, only its keys/values are used
            return
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, bank: dict | None = None, reference=None, recorder: AttentionRecorder | None = None,
                pos: torch.Tensor | None = None):
        b, c, h, w = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        if pos is not None:
            tokens = tokens + pos
        if bank is not None:
            bank[self.layer_id] = tokens
        if self.bank_only:
            return x
        kv = tokens if reference is None else torch.cat([tokens, reference], dim=1)
        d = c // self.heads

        def split(t):
            return t.reshape(t.shape[0], t.shape[1], self.heads, d).transpose(1, 2)

        probs = (split(self.to_q(tokens)) @ split(self.to_k(kv)).transpose(-1, -2) / math.sqrt(d)).softmax(-1)
        out = (probs @ split(self.to_v(kv))).transpose(1, 2).reshape(b, h * w, c)
        if reference is not None and recorder is not None and recorder.wants(self.layer_id):
            n = tokens.shape[1]
            mass = garment_mass(probs, slice(n, kv.shape[1]))
            recorder.add(AttentionRecord(self.layer_id, None, mass.reshape(b, h, w)))
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


class Stage(nn.Module):
    """ResBlock -> spatial attention [-> pose/garment cross-attention] [-> temporal fusion]."""

    def __init__(self, cin, cout, layer_id, cfg: RunConfig, time_dim, shared=None, source=None, temporal=False,
                 bank_only=False):
        super().__init__()
        m = cfg.model
        self.layer_id = layer_id
        self.res = ResBlock(cin, cout, time_dim, m.num_groups)
        self.attn = SpatialAttention(cout, m.head_dim, layer_id, bank_only)
        self.align = AlignmentCrossAttention(shared, cout, source) if shared is not None else None
        self.temporal = None
        if temporal:
            self.temporal = TemporalFusion(cout, AttentionConfig(cfg.atff.d_k, cfg.atff.num_groups))

    def forward(self, x, ctx: "_Pass"):
        x = self.res(x, ctx.temb)
        ref = ctx.reference.get(self.layer_id) if ctx.reference is not None else None
        x = self.attn(x, bank=ctx.bank, reference=ref, recorder=ctx.recorder, pos=ctx.pos(self.layer_id, x))
        if self.align is not None:
            x = self.align(x, ctx.embedding)
        if self.temporal is not None:
            x = self.temporal(x, ctx.num_frames, ctx.pairs)
        return x


@dataclass
class _Pass:
    temb: torch.Tensor | None
    positions: nn.ParameterDict
    bank: dict | None = None
    reference: dict | None = None
    recorder: AttentionRecorder | None = None
    embedding: GlobalEmbedding | None = None
    num_frames: int = 1
    pairs: torch.Tensor | None = None

    def pos(self, layer_id, x):
        key = f"{x.shape[-2]}x{x.shape[-1]}"
        return self.positions[key] if key in self.positions else None


class BranchUNet(nn.Module):
    def __init__(self, cfg: RunConfig, in_channels: int, reference: bool, shared=None):
        super().__init__()
        m = cfg.model
        widths = [m.base_width * 2**i for i in range(m.depth)]
        time_dim = None if reference else m.time_dim
        temporal = (not reference) and cfg.atff.enabled
        source = "garment" if reference else "pose"
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cur = widths[0]
        for i, w in enumerate(widths):
            self.down.append(Stage(cur, w, f"down{i}", cfg, time_dim, temporal=temporal))
            cur = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = Stage(cur, cur, "mid", cfg, time_dim, shared=shared, source=source, temporal=temporal)
        self.mid_res = ResBlock(cur, cur, time_dim, m.num_groups)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up.append(Stage(cur + widths[i], widths[i], f"up{i}", cfg, time_dim, temporal=temporal,
                                 bank_only=reference and i == 0))
            cur = widths[i]
            if i > 0:
                self.upsample.append(nn.Conv2d(cur, widths[i - 1], 3, padding=1))
                cur = widths[i - 1]
        self.head = None
        if not reference:
            self.head = nn.Sequential(nn.GroupNorm(default_groups(cur, m.num_groups), cur), nn.SiLU(),
                                      nn.Conv2d(cur, cfg.amfe.latent_channels, 3, padding=1))

    def forward(self, x, ctx: _Pass):
        h = self.conv_in(x)
        skips = []
        for i, stage in enumerate(self.down):
            h = stage(h, ctx)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, ctx)
        h = self.mid_res(h, ctx.temb)
        for i, stage in enumerate(self.up):
            h = stage(torch.cat([h, skips.pop()], dim=1), ctx)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return h if self.head is None else self.head(h)


@dataclass
class Conditioning:
    garment_feature: torch.Tensor  # (B, C, h, w)
    agnostic: torch.Tensor  # (B, N, C, h, w)
    mask: torch.Tensor  # (B, N, 1, h, w) area fraction
    pose: torch.Tensor | None  # (B, N, P, H, W)
    garment_embedding: GlobalEmbedding | None = None
    pose_embedding: GlobalEmbedding | None = None  # (B*N, T_e, D_e)

    @property
    def num_frames(self) -> int:
        return self.agnostic.shape[1]


@dataclass
class DenoiseOutput:
    eps_pred: torch.Tensor
    attention: list[AttentionRecord] = field(default_factory=list)


class TryOnModel(nn.Module):
    """Autoencoder, garment/pose conditioning and both UNet branches."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m, lat = cfg.model, cfg.amfe.latent_channels
        H, W = cfg.data.height, cfg.data.width
        self.latent_size = (H // 8, W // 8)
        if self.latent_size[0] % 2 ** (m.depth - 1) or self.latent_size[1] % 2 ** (m.depth - 1):
            raise ConfigurationError(f"latent grid {self.latent_size} cannot be halved {m.depth - 1} times")
        self.ae = ToyAutoencoder(lat, tuple(m.ae_widths))
        self.amfe = MultiScaleGarmentFeatures(self.ae.level_channels, lat) if cfg.amfe.enabled else None
        self.pose_embed = PoseEmbedding(m.pose_channels, lat, 8) if cfg.gpfa.pose_embed else None
        self.shared = None
        if cfg.gpfa.enabled:
            width = m.base_width * 2 ** (m.depth - 1)
            g = cfg.gpfa
            self.garment_encoder = GlobalEncoder(3, (H, W), g.tokens, g.embed_dim)
            self.pose_encoder = GlobalEncoder(m.pose_channels, (H, W), g.tokens, g.embed_dim)
            self.shared = SharedAttentionWeights(width, g.embed_dim, width, m.head_dim)
        self.reference = BranchUNet(cfg, lat, reference=True, shared=self.shared)
        mask_ch = 64 if m.mask_input == "unshuffle" else 1
        self.denoiser = BranchUNet(cfg, 2 * lat + mask_ch, reference=False, shared=self.shared)
        if self.shared is not None:
            self.denoiser.mid.align.pair_with(self.reference.mid.align)
        self.time_mlp = nn.Sequential(nn.Linear(m.time_dim, m.time_dim), nn.SiLU(), nn.Linear(m.time_dim, m.time_dim))
        self.positions = nn.ParameterDict()
        h, w = self.latent_size
        for i in range(m.depth):
            hi, wi, ci = h >> i, w >> i, m.base_width * 2**i
            init = grid_embedding(hi, wi, ci) if m.pos_init == "sincos" else 0.02 * torch.randn(hi * wi, ci)
            self.positions[f"{hi}x{wi}"] = nn.Parameter(init)
        # running per-channel latent statistics; diffusion runs on (z - mean) / std
        self.register_buffer("latent_mean", torch.zeros(lat))
        self.register_buffer("latent_std", torch.ones(lat))
        self.trained_steps = 0

    # ---------------------------------------------------------------- parameter groups

    def temporal_parameters(self):
        return [p for n, p in self.named_parameters() if ".temporal." in n]

    def spatial_parameters(self):
        return [p for n, p in self.named_parameters() if ".temporal." not in n]

    # ---------------------------------------------------------------- conditioning

    def encode_condition(self, batch: dict) -> Conditioning:
        """batch: agnostic (B,N,3,H,W), mask (B,N,H,W), pose (B,N,P,H,W), garment (B,3,H,W)."""
        agn = batch["agnostic"]
        if agn.ndim != 5:
            raise ValidationError(f"agnostic frames must be (B, N, 3, H, W), got {tuple(agn.shape)}")
        b, n = agn.shape[:2]
        with torch.no_grad():
            agn_lat = self.normalize(self.ae.encode(agn.flatten(0, 1))).unflatten(0, (b, n))
            f1, f2, f3 = self.ae.encode_pyramid(batch["garment"])
        feat = self.amfe(f1, f2, f3) if self.amfe is not None else f3
        mask = batch["mask"].flatten(0, 1)[:, None].float()
        if self.cfg.model.mask_input == "unshuffle":
            mask = F.pixel_unshuffle(mask, 8)  # every mask pixel, stacked per latent cell
        else:
            mask = F.adaptive_avg_pool2d(mask, self.latent_size)  # covered fraction per latent cell
        cond = Conditioning(feat, agn_lat, mask.unflatten(0, (b, n)), batch.get("pose"))
        if self.shared is not None:
            cond.garment_embedding = GlobalEmbedding(self.garment_encoder(batch["garment"]), "garment")
            cond.pose_embedding = GlobalEmbedding(self.pose_encoder(batch["pose"].flatten(0, 1)), "pose")
        return cond

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std[:, None, None] + self.latent_mean[:, None, None]

    @torch.no_grad()
    def track_latent_stats(self, z: torch.Tensor, momentum: float) -> None:
        """EMA update of the per-channel statistics from raw latents (..., C, h, w)."""
        flat = z.detach().movedim(-3, 0).flatten(1)
        self.latent_mean.lerp_(flat.mean(dim=1), momentum)
        self.latent_std.lerp_(flat.std(dim=1).clamp_min(1e-4), momentum)

    def encode_images(self, x: torch.Tensor, normalized: bool = True) -> torch.Tensor:
        """(B, N, 3, H, W) -> (B, N, C, h, w) latents, in diffusion units unless `normalized` is off."""
        z = self.ae.encode(x.flatten(0, 1))
        return (self.normalize(z) if normalized else z).unflatten(0, x.shape[:2])

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        """Inverse of `encode_images`: diffusion-unit latents to images."""
        return self.ae.decode(self.denormalize(z.flatten(0, 1))).unflatten(0, z.shape[:2])

    # ---------------------------------------------------------------- denoising

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: Conditioning, pairs: torch.Tensor | None = None,
                recorder: AttentionRecorder | None = None) -> DenoiseOutput:
        if x_t.ndim != 5 or x_t.shape[-2:] != self.latent_size:
            raise ValidationError(f"latents must be (B, N, C, {self.latent_size[0]}, {self.latent_size[1]}), "
                                  f"got {tuple(x_t.shape)}")
        b, n = x_t.shape[:2]
        if cond.agnostic.shape[:2] != (b, n):
            raise ValidationError("conditioning batch/clip size does not match the latents")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        if self.cfg.atff.enabled and pairs is None:
            pairs = sample_clip_pairs(n, np.random.default_rng(0))

        z = x_t
        if self.pose_embed is not None:
            if cond.pose is None:
                raise ValidationError("pose maps required when pose embedding is enabled")
            z = inject_pose(z, self.pose_embed(cond.pose.flatten(0, 1)).unflatten(0, (b, n)))
        inp = torch.cat([z, cond.agnostic, cond.mask], dim=2).flatten(0, 1)

        bank: dict = {}
        self.reference(cond.garment_feature, _Pass(None, self.positions, bank=bank,
                                                   embedding=cond.garment_embedding))
        reference = {k: v.repeat_interleave(n, dim=0) for k, v in bank.items()}
        temb = self.time_mlp(timestep_embedding(t, self.cfg.model.time_dim)).repeat_interleave(n, dim=0)
        ctx = _Pass(temb, self.positions, reference=reference, recorder=recorder,
                    embedding=cond.pose_embedding, num_frames=n, pairs=pairs)
        eps = self.denoiser(inp, ctx).unflatten(0, (b, n))
        return DenoiseOutput(eps, list(recorder.records) if recorder is not None else [])


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    ts = np.round(np.linspace(T - 1, 0, min(steps, T))).astype(int)
    return list(dict.fromkeys(ts.tolist()))


def ddim_step(x_t, eps, ab_t: float, ab_prev: float, clip: float | None = None):
    """One deterministic update; returns (x_prev, x0_estimate)."""
    x0 = (x_t - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
    if clip:
        x0 = x0.clamp(-clip, clip)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps, x0


def batch_of(sample: dict) -> dict:
    """Add the batch axis to a single sample's tensors."""
    return {k: v.unsqueeze(0) for k, v in sample.items()}


@torch.no_grad()
def generate(model: TryOnModel, sample: dict, steps: int, sched: NoiseSchedule, seed: int = 0,
             composite: bool = True, clip: float | None = None, require_trained: bool = True) -> torch.Tensor:
    """Deterministic sampling for one sample (unbatched tensors). Returns (N, 3, H, W) in [0, 1]."""
    if require_trained and model.trained_steps <= 0:
        raise StateError("model has no trained weights loaded")
    was_training = model.training
    model.eval()
    try:
        batch = batch_of(sample)
        cond = model.encode_condition(batch)
        n = cond.num_frames
        shape = (1, n, model.cfg.amfe.latent_channels, *model.latent_size)
        gen = torch.Generator().manual_seed(int(seed))
        x = torch.randn(shape, generator=gen)
        rng = np.random.default_rng(int(seed))
        pairs = sample_clip_pairs(n, rng)
        ts = ddim_timesteps(sched.num_steps, steps)
        for i, t in enumerate(ts):
            if model.cfg.atff.seed_policy == "per_step" and i > 0:
                pairs = sample_clip_pairs(n, rng)
            eps = model(x, torch.tensor([t]), cond, pairs).eps_pred
            ab_prev = float(sched.alpha_bars[ts[i + 1]]) if i + 1 < len(ts) else 1.0
            x, _ = ddim_step(x, eps, float(sched.alpha_bars[t]), ab_prev, clip)
        frames = model.decode_latents(x)[0]
        if composite:
            m = sample["mask"].unsqueeze(1).to(frames.dtype)
            frames = m * frames + (1 - m) * sample["source"]
        return frames
    finally:
        model.train(was_training)
