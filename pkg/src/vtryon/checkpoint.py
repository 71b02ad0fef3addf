"""Single-file checkpoints: weights, config echo, schedule, step counter, optimizer and RNG state."""
from __future__ import annotations

from pathlib import Path

import torch

from .config import RunConfig
from .diffusion import NoiseSchedule, make_schedule
from .errors import LoadError, StateError

FORMAT = "vtryon-ckpt/1"


def save_checkpoint(path, model, cfg: RunConfig, sched: NoiseSchedule, step: int, stage: str,
                    optimizer=None, rng_state: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "stage": stage,
        "step": int(step),
        "trained_steps": int(model.trained_steps),
        "config": cfg.flat(),
        "schedule": sched.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng_state,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise LoadError(path, f"unreadable checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise LoadError(path, f"not a {FORMAT} checkpoint (format tag {found!r})")
    return payload


def load_model(path, overrides: dict | None = None):
    """Rebuild the model from a checkpoint's config echo and load its weights.

    Returns (model, cfg, schedule, payload). `overrides` may only touch
    run-time keys (sampling, data paths); architecture comes from the file.
    """
    from .network import TryOnModel

    payload = read_checkpoint(path)
    cfg = RunConfig.from_flat(payload["config"])
    if overrides:
        cfg.update(overrides)
    model = TryOnModel(cfg)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise LoadError(path, f"weights do not match the recorded config ({e})") from e
    model.trained_steps = payload.get("trained_steps", payload["step"])
    sched = NoiseSchedule.from_dict(payload["schedule"]) if payload.get("schedule") else make_schedule(
        cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    return model, cfg, sched, payload
