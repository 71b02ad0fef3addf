"""SSIM, PSNR, temporal flicker and Fréchet feature distance."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError

PSNR_IDENTICAL = math.inf  # returned by psnr() when the inputs are identical
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
EIG_CLAMP_TOL = 1e-8


def to_luma(x) -> np.ndarray:
    """(H, W), (H, W, 3) or (3, H, W) in [0, 1] -> (H, W) float64 luminance."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[-1] == 3:
        return x @ np.array([0.299, 0.587, 0.114])
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(np.array([0.299, 0.587, 0.114]), x, axes=1)
    raise ValidationError(f"cannot read shape {x.shape} as a frame")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM on luminance with an 11-tap Gaussian window (reflect padding)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    x, y = to_luma(a), to_luma(b)
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def masked_ssim(a, b, mask) -> float:
    """Mean of the SSIM map over mask pixels (nan for an empty mask)."""
    m = np.asarray(mask) > 0.5
    if m.shape != to_luma(np.asarray(a)).shape:
        raise ValidationError(f"mask shape {m.shape} does not match frame")
    if not m.any():
        return math.nan
    return float(ssim_map(a, b)[m].mean())


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0, 1] data; PSNR_IDENTICAL when MSE is 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def motion_magnitude(frames) -> float:
    """Mean over consecutive pairs of mean |frame_{i+1} - frame_i|."""
    v = np.asarray(frames, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValidationError(f"need at least 2 frames, got {v.shape[0]}")
    return float(np.abs(np.diff(v, axis=0)).reshape(v.shape[0] - 1, -1).mean(axis=1).mean())


def flicker(frames, reference) -> float:
    """|motion(frames) - motion(reference)|; 0 when the video moves like the reference."""
    return abs(motion_magnitude(frames) - motion_magnitude(reference))


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; tiny negative eigenvalues clamped."""
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -EIG_CLAMP_TOL * scale:
        raise ValidationError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) for Gaussians."""
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (mu_a.size, mu_a.size):
        raise ValidationError("Gaussian parameter shapes disagree")
    # Tr (S_a S_b)^{1/2} = Tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, which keeps everything symmetric
    ra = psd_sqrt(cov_a)
    cross = np.trace(psd_sqrt(ra @ cov_b @ ra))
    d = mu_a - mu_b
    return float(max(d @ d + np.trace(cov_a) + np.trace(cov_b) - 2 * cross, 0.0))


def gaussian_fit(features) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValidationError(f"need at least 2 feature vectors for a covariance, got {f.shape[0]}")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def feature_distance(a, b, extractor: Callable | None = None) -> float:
    """Fréchet distance between Gaussian fits of extractor(a) and extractor(b).

    With no extractor, `a` and `b` are already (n, d) feature sets.
    """
    fa = extractor(a) if extractor is not None else a
    fb = extractor(b) if extractor is not None else b
    return frechet_distance(*gaussian_fit(fa), *gaussian_fit(fb))


def summarize(values) -> dict:
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
