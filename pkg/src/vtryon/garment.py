"""Toy image autoencoder and multi-scale garment feature fusion."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

NUM_LEVELS = 3


def default_groups(channels: int, cap: int = 8) -> int:
    g = min(cap, channels)
    while channels % g:
        g -= 1
    return g


class ToyAutoencoder(nn.Module):
    """Three stride-2 levels, 8x spatial reduction, `latent_channels` latent maps.

    `encode_pyramid` exposes the outputs of the three downsampling levels,
    finest first; the last one is the latent.
    """

    def __init__(self, latent_channels: int = 4, widths=(32, 48, 64), image_channels: int = 3):
        super().__init__()
        w0, w1, w2 = widths
        self.latent_channels = latent_channels
        self.level_channels = (w0, w1, latent_channels)
        act = nn.SiLU
        self.stem = nn.Sequential(nn.Conv2d(image_channels, w0, 3, padding=1), act())
        self.down1 = nn.Sequential(nn.Conv2d(w0, w0, 3, stride=2, padding=1), act(),
                                   nn.Conv2d(w0, w0, 3, padding=1), act())
        self.down2 = nn.Sequential(nn.Conv2d(w0, w1, 3, stride=2, padding=1), act(),
                                   nn.Conv2d(w1, w1, 3, padding=1), act())
        self.down3 = nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2, padding=1), act(),
                                   nn.Conv2d(w2, w2, 3, padding=1), act(),
                                   nn.Conv2d(w2, latent_channels, 3, padding=1))
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, w2, 3, padding=1), act(),
            nn.Conv2d(w2, w2, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w2, w1, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w1, w0, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w0, w0, 3, padding=1), act(),
            nn.Conv2d(w0, image_channels, 3, padding=1),
        )

    @property
    def factor(self) -> int:
        return 2**NUM_LEVELS

    def check_input(self, x: torch.Tensor) -> None:
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValidationError(f"image size {tuple(x.shape[-2:])} not divisible by {self.factor}")

    def encode_pyramid(self, x: torch.Tensor):
        """Images in [0, 1] -> (f_1, f_2, f_3) at 1/2, 1/4, 1/8 resolution."""
        self.check_input(x)
        f1 = self.down1(self.stem(x * 2 - 1))
        f2 = self.down2(f1)
        f3 = self.down3(f2)
        return f1, f2, f3

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_pyramid(x)[-1]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))


class Standardize(nn.Module):
    """space-to-depth -> 1x1 conv -> GroupNorm -> SiLU, landing on the latent grid."""

    def __init__(self, in_channels: int, level: int, latent_channels: int, num_groups: int | None = None):
        super().__init__()
        if level not in (1, 2, 3):
            raise ValidationError(f"level must be 1, 2 or 3, got {level}")
        self.level = level
        self.factor = 2 ** (NUM_LEVELS - level)
        self.mix = nn.Conv2d(in_channels * self.factor**2, latent_channels, 1)
        self.norm = nn.GroupNorm(num_groups or default_groups(latent_channels), latent_channels)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] % self.factor or f.shape[-2] % self.factor:
            raise ValidationError(f"level-{self.level} feature {tuple(f.shape[-2:])} not divisible by {self.factor}")
        x = F.pixel_unshuffle(f, self.factor) if self.factor > 1 else f
        return F.silu(self.norm(self.mix(x)))


def standardize(f_l: torch.Tensor, level: int, module: Standardize) -> torch.Tensor:
    if module.level != level:
        raise ValidationError(f"module is for level {module.level}, not {level}")
    return module(f_l)


def adaptive_fuse(f1_bar, f2_bar, f3_bar, alpha: torch.Tensor, local_conv: nn.Conv2d,
                  global_conv: nn.Conv2d) -> torch.Tensor:
    """alpha_1 * local(f̄_1) + alpha_2 * global(f̄_2) + alpha_3 * f̄_3."""
    if not (f1_bar.shape == f2_bar.shape == f3_bar.shape):
        raise ValidationError(f"standardized shapes differ: {tuple(f1_bar.shape)}, "
                              f"{tuple(f2_bar.shape)}, {tuple(f3_bar.shape)}")
    if alpha.shape != (3,):
        raise ValidationError(f"alpha must have 3 entries, got {tuple(alpha.shape)}")
    return alpha[0] * local_conv(f1_bar) + alpha[1] * global_conv(f2_bar) + alpha[2] * f3_bar


class MultiScaleGarmentFeatures(nn.Module):
    """Fuses the autoencoder's three levels into one latent-shaped garment feature.

    The coarsest term is the encoder latent itself, so with alpha=(0, 0, 1)
    (the initialization) the output is exactly the plain latent.
    """

    def __init__(self, level_channels, latent_channels: int, num_groups: int | None = None):
        super().__init__()
        c1, c2, _ = level_channels
        self.std1 = Standardize(c1, 1, latent_channels, num_groups)
        self.std2 = Standardize(c2, 2, latent_channels, num_groups)
        self.local_conv = nn.Conv2d(latent_channels, latent_channels, 3, padding=1)
        self.global_conv = nn.Conv2d(latent_channels, latent_channels, 7, padding=3)
        nn.init.zeros_(self.local_conv.bias)
        nn.init.zeros_(self.global_conv.bias)
        self.alpha = nn.Parameter(torch.tensor([0.0, 0.0, 1.0]))

    def standardized(self, f1, f2, f3):
        return self.std1(f1), self.std2(f2), f3

    def forward(self, f1, f2, f3) -> torch.Tensor:
        f1b, f2b, f3b = self.standardized(f1, f2, f3)
        return adaptive_fuse(f1b, f2b, f3b, self.alpha, self.local_conv, self.global_conv)
