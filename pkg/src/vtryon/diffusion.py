"""Noise schedule, forward process, epsilon-prediction loss and Min-SNR weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateTimestepError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.shape != alpha_bars.shape or betas.size == 0:
            raise ValidationError("betas and alpha_bars must be equal-length non-empty vectors")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    def check_timestep(self, t) -> None:
        t_arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ValidationError(f"timestep must be integer, got {t_arr.dtype}")
        if t_arr.size and (t_arr.min() < 0 or t_arr.max() >= self.num_steps):
            raise ValidationError(f"timestep out of range [0, {self.num_steps}): {t_arr}")

    def alpha_bar(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        """alpha_bar at `t` (int or integer tensor) as a tensor matching `like`'s dtype/device."""
        self.check_timestep(t)
        idx = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        out = torch.from_numpy(np.asarray(self.alpha_bars[idx]))
        if like is not None:
            out = out.to(dtype=like.dtype, device=like.device)
        return out

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        betas = np.asarray(d["betas"], dtype=np.float64)
        return cls(betas, np.cumprod(1.0 - betas))


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def _broadcast_per_sample(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    # scalar -> scalar; per-sample vector -> (B, 1, 1, ...)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape[0], *([1] * (x.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    `t` is an int, or an integer tensor with one timestep per leading-axis sample.
    """
    if x0.shape != eps.shape:
        raise ValidationError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(x0.shape)}")
    ab = _broadcast_per_sample(sched.alpha_bar(t, like=x0), x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def ldm_loss(eps_pred: torch.Tensor, eps: torch.Tensor, weights=None) -> torch.Tensor:
    """Batch mean of weight * mean-squared error; weights default to 1."""
    if eps_pred.shape != eps.shape:
        raise ValidationError(f"prediction shape {tuple(eps_pred.shape)} != target shape {tuple(eps.shape)}")
    per_sample = (eps - eps_pred).pow(2).reshape(eps.shape[0], -1).mean(dim=1)
    if weights is None:
        return per_sample.mean()
    w = torch.as_tensor(weights, dtype=per_sample.dtype, device=per_sample.device)
    if w.ndim == 1 and w.shape[0] != per_sample.shape[0]:
        raise ValidationError(f"{w.shape[0]} weights for batch of {per_sample.shape[0]}")
    return (w * per_sample).mean()


def snr(t, sched: NoiseSchedule):
    sched.check_timestep(t)
    idx = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    ab = np.asarray(sched.alpha_bars[idx])
    if np.any(ab >= 1.0):
        raise DegenerateTimestepError(f"alpha_bar == 1 at t={idx}: SNR is undefined")
    return ab / (1.0 - ab)


def minsnr_weight(t, sched: NoiseSchedule, gamma: float = 5.0):
    """min(SNR, gamma) / SNR for epsilon prediction.

    Returns a float for scalar `t` and a float64 tensor for tensor `t`.
    """
    if gamma <= 0:
        raise ValidationError(f"gamma must be positive, got {gamma}")
    s = snr(t, sched)
    w = np.minimum(s, gamma) / s
    if torch.is_tensor(t):
        return torch.from_numpy(np.asarray(w, dtype=np.float64)).to(t.device)
    return float(w)
