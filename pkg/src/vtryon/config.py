"""Run configuration: dataclass sections addressed by flat dotted keys.

The on-disk format is one ``section.key = value`` pair per line; values are
JSON literals (bare words are read as strings). ``#`` starts a comment.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import LoadError, ValidationError

SEED_ENV = "CHRONOTAILOR_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={raw!r} is not an integer") from None


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    gamma: float = 5.0  # Min-SNR clamp


@dataclass
class RasgConfig:
    enabled: bool = True
    lambda_n: float = 0.5
    lambda_r: float = 0.1
    layers: list = field(default_factory=lambda: ["down0", "down1", "mid", "up1", "up0"])


@dataclass
class AtffConfig:
    enabled: bool = True
    num_groups: int = 8
    d_k: int = 16
    seed_policy: str = "per_step"  # or "fixed"


@dataclass
class AmfeConfig:
    enabled: bool = True
    latent_channels: int = 4


@dataclass
class GpfaConfig:
    enabled: bool = True
    pose_embed: bool = True
    embed_dim: int = 64
    tokens: int = 4


@dataclass
class ModelConfig:
    base_width: int = 32
    depth: int = 2  # UNet resolution levels on the latent grid
    head_dim: int = 16
    num_groups: int = 8
    time_dim: int = 128
    ae_widths: list = field(default_factory=lambda: [16, 32, 64])
    pose_channels: int = 3
    mask_input: str = "area"  # mask channels for the denoiser: "area" (1) or "unshuffle" (64)
    pos_init: str = "learned"  # attention position table init: "learned" (small random) or "sincos"


@dataclass
class DataConfig:
    height: int = 64
    width: int = 48
    frames: int = 8
    motion: float = 1.0
    texture: str = "any"
    mask_area: list = field(default_factory=lambda: [0.1, 0.35])


@dataclass
class TrainConfig:
    stage: str = "image"
    steps: int = 2000
    batch_size: int = 8
    clips_per_batch: int = 2  # video stage
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    recon_weight: float = 1.0
    latent_reg: float = 1e-3
    latent_momentum: float = 0.01
    augment: bool = False  # random flips and RGB channel permutations
    seed: int = 0
    ckpt_every: int = 500
    log_every: int = 10


@dataclass
class SampleConfig:
    steps: int = 25
    composite: bool = True
    clip_latents: float = 6.0
    seed: int = 0


SECTIONS = {
    "diffusion": DiffusionConfig, "rasg": RasgConfig, "atff": AtffConfig, "amfe": AmfeConfig,
    "gpfa": GpfaConfig, "model": ModelConfig, "data": DataConfig, "train": TrainConfig, "sample": SampleConfig,
}


@dataclass
class RunConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    rasg: RasgConfig = field(default_factory=RasgConfig)
    atff: AtffConfig = field(default_factory=AtffConfig)
    amfe: AmfeConfig = field(default_factory=AmfeConfig)
    gpfa: GpfaConfig = field(default_factory=GpfaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    @staticmethod
    def keys(sections=None) -> list[str]:
        return [f"{s}.{f.name}" for s, cls in SECTIONS.items() if sections is None or s in sections
                for f in fields(cls)]

    def get(self, key: str):
        section, name = _split(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, value) -> None:
        section, name = _split(key)
        current = getattr(getattr(self, section), name)
        setattr(getattr(self, section), name, _coerce(key, value, current))

    def update(self, flat: dict) -> "RunConfig":
        for k, v in flat.items():
            self.set(k, v)
        self.validate()
        return self

    def flat(self) -> dict:
        return {f"{s}.{k}": v for s in SECTIONS for k, v in asdict(getattr(self, s)).items()}

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.flat().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        return cls().update(flat)

    def validate(self) -> None:
        d, t = self.diffusion, self.train
        if d.T < 1 or not (0 < d.beta_start <= d.beta_end < 1) or d.gamma <= 0:
            raise ValidationError("diffusion.* out of range (need T >= 1, 0 < beta_start <= beta_end < 1, gamma > 0)")
        if self.rasg.lambda_n < 0 or self.rasg.lambda_r < 0:
            raise ValidationError("rasg.lambda_n and rasg.lambda_r must be >= 0")
        if self.atff.seed_policy not in ("per_step", "fixed"):
            raise ValidationError(f"atff.seed_policy must be per_step or fixed, got {self.atff.seed_policy!r}")
        if t.stage not in ("image", "video"):
            raise ValidationError(f"train.stage must be image or video, got {t.stage!r}")
        if t.steps < 0 or t.batch_size < 1 or t.clips_per_batch < 1 or t.lr <= 0:
            raise ValidationError("train.steps must be >= 0; batch sizes and lr must be positive")
        if self.model.pos_init not in ("learned", "sincos"):
            raise ValidationError(f"model.pos_init must be learned or sincos, got {self.model.pos_init!r}")
        if self.model.mask_input not in ("area", "unshuffle"):
            raise ValidationError(f"model.mask_input must be area or unshuffle, got {self.model.mask_input!r}")
        if not 0 <= t.latent_momentum <= 1:
            raise ValidationError(f"train.latent_momentum must lie in [0, 1], got {t.latent_momentum}")
        if self.sample.steps < 1:
            raise ValidationError("sample.steps must be >= 1")
        if self.data.height % 8 or self.data.width % 8:
            raise ValidationError(f"data resolution {self.data.width}x{self.data.height} must be divisible by 8")


def _split(key: str):
    section, _, name = key.partition(".")
    if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
        raise ValidationError(f"unknown config key {key!r}")
    return section, name


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key, value, current):
    if isinstance(value, str) and not isinstance(current, str):
        value = parse_value(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValidationError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ValidationError(f"{key} expects a list, got {value!r}")
        return value
    return str(value)


def parse_flat(text: str, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{origin}:{n}: expected 'key = value'")
        out[key.strip()] = parse_value(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- config file <- overrides."""
    cfg = RunConfig()
    cfg.train.seed = cfg.sample.seed = default_seed()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise LoadError(p, "config file not found")
        cfg.update(parse_flat(p.read_text(), str(p)))
    if overrides:
        cfg.update(overrides)
    cfg.validate()
    return cfg
