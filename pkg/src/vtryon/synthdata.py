"""Procedural try-on clips: a textured garment patch on a moving stick figure.

Every sample is a five-tuple (source frames, agnostic frames, masks, pose
maps, garment image), all stored as 8-bit arrays so that writing to PNG and
reading back is lossless.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import LoadError, ValidationError

TEXTURES = ("stripes", "checker", "dots")
POSE_CHANNELS = 3
AGNOSTIC_FILL = 128
FORMAT = "vtryon-sample/1"

# (name, from keypoint, to keypoint); order fixes the part index channel
LIMBS = (
    ("l_upper_arm", "l_shoulder", "l_elbow"), ("l_forearm", "l_elbow", "l_hand"),
    ("r_upper_arm", "r_shoulder", "r_elbow"), ("r_forearm", "r_elbow", "r_hand"),
    ("l_thigh", "l_hip", "l_knee"), ("l_shin", "l_knee", "l_foot"),
    ("r_thigh", "r_hip", "r_knee"), ("r_shin", "r_knee", "r_foot"),
    ("shoulders", "l_shoulder", "r_shoulder"), ("hips", "l_hip", "r_hip"),
    ("l_side", "l_shoulder", "l_hip"), ("r_side", "r_shoulder", "r_hip"),
    ("neck", "neck", "head"),
)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 48
    frames: int = 8
    motion: float = 1.0
    texture: str | None = None  # None: drawn per sample from TEXTURES
    mask_area: tuple[float, float] = (0.1, 0.35)
    seed: int = 0

    def check(self) -> None:
        lo, hi = self.mask_area
        if not (0 < lo < hi < 0.5):
            raise ValidationError(f"mask_area must satisfy 0 < lo < hi < 0.5, got {self.mask_area}")
        if lo * 1.3 > hi / 1.3:
            raise ValidationError(f"mask_area range {self.mask_area} too narrow for the scale jitter")
        if self.texture is not None and self.texture not in TEXTURES:
            raise ValidationError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.frames < 1 or self.height < 16 or self.width < 16:
            raise ValidationError("need frames >= 1 and a resolution of at least 16x16")
        if self.motion < 0:
            raise ValidationError("motion amplitude must be >= 0")


@dataclass
class SampleTuple:
    source: np.ndarray  # (N, H, W, 3) uint8
    agnostic: np.ndarray  # (N, H, W, 3) uint8
    masks: np.ndarray  # (N, H, W) uint8 in {0, 1}
    pose: np.ndarray  # (N, H, W, POSE_CHANNELS) uint8
    garment: np.ndarray  # (H, W, 3) uint8
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.source.shape[0]

    def validate(self, where: str = "sample") -> None:
        n = self.source.shape[0]
        for name in ("agnostic", "masks", "pose"):
            if getattr(self, name).shape[0] != n:
                raise ValidationError(f"{where}: {name} has {getattr(self, name).shape[0]} frames, source has {n}")
        hw = self.source.shape[1:3]
        for name in ("agnostic", "masks", "pose"):
            if getattr(self, name).shape[1:3] != hw:
                raise ValidationError(f"{where}: {name} spatial size differs from source")
        if self.garment.shape[:2] != hw:
            raise ValidationError(f"{where}: garment image size differs from frames")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValidationError(f"{where}: masks are not binary")

    def tensors(self) -> dict[str, torch.Tensor]:
        """Float tensors in [0, 1], channels first."""
        def img(a):
            return torch.from_numpy(a).float().div(255).movedim(-1, -3).contiguous()

        return {
            "source": img(self.source),
            "agnostic": img(self.agnostic),
            "mask": torch.from_numpy(self.masks).float(),
            "pose": img(self.pose),
            "garment": img(self.garment),
        }

    def equals(self, other: "SampleTuple") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("source", "agnostic", "masks", "pose", "garment"))


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _luma(c) -> float:
    return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]


def _two_colors(rng: np.random.Generator, min_contrast: float = 0.3):
    while True:
        c1, c2 = rng.uniform(0.05, 0.95, size=(2, 3))
        if abs(_luma(c1) - _luma(c2)) >= min_contrast:
            return c1, c2


def _texture_value(kind: str, u, v, period: float, phase, orient: float):
    """Pattern intensity in [0, 1] at patch-local coordinates."""
    ca, sa = math.cos(orient), math.sin(orient)
    a = (ca * u + sa * v) / period + phase[0]
    b = (-sa * u + ca * v) / period + phase[1]
    if kind == "stripes":
        return 0.5 + 0.5 * np.tanh(3.0 * np.sin(2 * np.pi * a))
    if kind == "checker":
        return 0.5 + 0.5 * np.tanh(4.0 * np.sin(2 * np.pi * a) * np.sin(2 * np.pi * b))
    da = a - np.round(a)
    db = b - np.round(b)
    return np.exp(-(da**2 + db**2) / (2 * 0.18**2))


def _segment_distance(px, py, p, q):
    d = np.subtract(q, p)
    L2 = max(float(d @ d), 1e-9)
    t = np.clip(((px - p[0]) * d[0] + (py - p[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(px - (p[0] + t * d[0]), py - (p[1] + t * d[1]))


class _Scene:
    """Per-sample random draw: figure trajectory, garment geometry and texture."""

    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        H, W, m = cfg.height, cfg.width, cfg.motion
        lo, hi = cfg.mask_area
        self.cfg = cfg
        self.kind = cfg.texture or TEXTURES[rng.integers(len(TEXTURES))]
        area = rng.uniform(lo * 1.3, hi / 1.3) * H * W
        aspect = rng.uniform(1.05, 1.45)
        self.gw = math.sqrt(area / aspect)
        self.gh = aspect * self.gw
        self.base = np.array([W / 2 + rng.uniform(-0.12, 0.12) * W * m, H / 2 + rng.uniform(-0.06, 0.06) * H * m])
        self.amp = np.array([rng.uniform(0.04, 0.12) * W * m, rng.uniform(0.02, 0.06) * H * m])
        self.freq = rng.uniform(0.4, 1.0, size=4)
        self.phase = rng.uniform(0, 2 * np.pi, size=4)
        self.rot0 = math.radians(rng.uniform(-5, 5)) * min(m, 1.0)
        self.rot_amp = math.radians(rng.uniform(2, 8)) * m
        self.scale_amp = 0.05 * min(m, 1.0)
        self.colors = _two_colors(rng)
        self.period = rng.uniform(14.0, 22.0)
        self.tex_phase = rng.uniform(0, 1, size=2)
        self.tex_orient = float(rng.choice([0.0, math.pi / 2, math.pi / 4, -math.pi / 4]))
        self.skin = rng.uniform(0.45, 0.9) * np.array([1.0, 0.8, 0.65])
        self.pants = rng.uniform(0.05, 0.5, size=3)
        self.bg = rng.uniform(0.2, 0.95, size=(2, 3))
        self.bg_period = rng.uniform(8, 20)
        self.bg_angle = rng.uniform(0, np.pi)
        self.arm_phase = rng.uniform(0, 2 * np.pi, size=2)

    def pose_at(self, t: float):
        """(center, rotation, scale) of the garment at clip-relative time t in [0, 1)."""
        H, W = self.cfg.height, self.cfg.width
        w = 2 * np.pi * self.freq
        c = self.base + self.amp * np.sin(w[:2] * t + self.phase[:2])
        rot = self.rot0 + self.rot_amp * math.sin(w[2] * t + self.phase[2])
        s = 1.0 + self.scale_amp * math.sin(w[3] * t + self.phase[3])
        # keep the rotated patch inside the frame with a 1px margin
        hw = 0.5 * s * (abs(math.cos(rot)) * self.gw + abs(math.sin(rot)) * self.gh)
        hh = 0.5 * s * (abs(math.sin(rot)) * self.gw + abs(math.cos(rot)) * self.gh)
        c = np.array([np.clip(c[0], hw + 1, W - hw - 1), np.clip(c[1], hh + 1, H - hh - 1)])
        return c, rot, s

    def keypoints(self, c, rot, s, t: float) -> dict[str, np.ndarray]:
        cr, sr = math.cos(rot), math.sin(rot)

        def at(u, v):
            return c + s * np.array([cr * u - sr * v, sr * u + cr * v])

        gw, gh = self.gw, self.gh
        k = {
            "l_shoulder": at(-gw / 2, -gh / 2), "r_shoulder": at(gw / 2, -gh / 2),
            "l_hip": at(-gw / 2 * 0.8, gh / 2), "r_hip": at(gw / 2 * 0.8, gh / 2),
            "neck": at(0, -gh / 2),
        }
        k["head"] = at(0, -gh / 2 - 0.3 * gh)
        for side, sign, ph in (("l", -1, self.arm_phase[0]), ("r", 1, self.arm_phase[1])):
            swing = 0.35 + 0.3 * math.sin(2 * np.pi * t * 1.3 + ph)
            ang = rot + math.pi / 2 - sign * swing
            upper = 0.45 * gh * s
            k[f"{side}_elbow"] = k[f"{side}_shoulder"] + upper * np.array([math.cos(ang), math.sin(ang)])
            ang2 = ang - sign * 0.25
            k[f"{side}_hand"] = k[f"{side}_elbow"] + upper * np.array([math.cos(ang2), math.sin(ang2)])
            leg = rot + math.pi / 2 - sign * 0.12 * (1 + math.sin(2 * np.pi * t + ph))
            thigh = 0.5 * gh * s
            k[f"{side}_knee"] = k[f"{side}_hip"] + thigh * np.array([math.cos(leg), math.sin(leg)])
            k[f"{side}_foot"] = k[f"{side}_knee"] + thigh * np.array([math.cos(leg), math.sin(leg)])
        return k

    def garment_pixels(self, px, py, c, rot, s):
        """(inside mask, RGB) for the garment patch placed at (c, rot, s)."""
        cr, sr = math.cos(rot), math.sin(rot)
        dx, dy = px - c[0], py - c[1]
        u = (cr * dx + sr * dy) / s
        v = (-sr * dx + cr * dy) / s
        inside = (np.abs(u) <= self.gw / 2) & (np.abs(v) <= self.gh / 2)
        val = _texture_value(self.kind, u, v, self.period, self.tex_phase, self.tex_orient)[..., None]
        rgb = self.colors[0] * (1 - val) + self.colors[1] * val
        return inside, rgb

    def background(self, px, py):
        a = (math.cos(self.bg_angle) * px + math.sin(self.bg_angle) * py) / self.bg_period
        grad = (py / self.cfg.height)[..., None]
        base = self.bg[0] * (1 - grad) + self.bg[1] * grad
        return np.clip(base + 0.06 * np.sin(2 * np.pi * a)[..., None], 0, 1)


def generate_scene(cfg: SceneConfig) -> SampleTuple:
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    sc = _Scene(cfg, rng)
    H, W, N = cfg.height, cfg.width, cfg.frames
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    src = np.empty((N, H, W, 3))
    masks = np.empty((N, H, W), dtype=np.uint8)
    pose = np.zeros((N, H, W, POSE_CHANNELS))
    for f in range(N):
        t = f / max(N, 1)
        c, rot, s = sc.pose_at(t)
        kp = sc.keypoints(c, rot, s, t)
        img = sc.background(px, py)
        for i, (name, a, b) in enumerate(LIMBS):
            d = _segment_distance(px, py, kp[a], kp[b])
            if name.startswith(("l_", "r_")) and name not in ("l_side", "r_side"):
                color = sc.pants if ("thigh" in name or "shin" in name) else sc.skin
                img = np.where((d < 1.6)[..., None], color, img)
            pose[f, ..., 1] = np.maximum(pose[f, ..., 1], np.clip(1.5 - d, 0, 1))
            pose[f, ..., 2] = np.where(d < 1.0, (i + 1) / len(LIMBS), pose[f, ..., 2])
        head_r = 0.16 * sc.gh * s
        img = np.where((np.hypot(px - kp["head"][0], py - kp["head"][1]) < head_r)[..., None], sc.skin, img)
        inside, rgb = sc.garment_pixels(px, py, c, rot, s)
        img = np.where(inside[..., None], rgb, img)
        for p in kp.values():
            pose[f, ..., 0] = np.maximum(pose[f, ..., 0], np.exp(-((px - p[0]) ** 2 + (py - p[1]) ** 2) / (2 * 1.5**2)))
        src[f] = img
        masks[f] = inside
    canon_inside, canon_rgb = sc.garment_pixels(px, py, np.array([W / 2, H / 2]), 0.0, 1.0)
    garment = np.where(canon_inside[..., None], canon_rgb, 1.0)

    source = _to_u8(src)
    agnostic = np.where(masks[..., None].astype(bool), np.uint8(AGNOSTIC_FILL), source)
    meta = {"format": FORMAT, "seed": int(cfg.seed), "texture": sc.kind, "config": _config_echo(cfg)}
    return SampleTuple(source, agnostic, masks, _to_u8(pose), _to_u8(garment), meta)


def _config_echo(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["mask_area"] = list(cfg.mask_area)
    return d


# ---------------------------------------------------------------- on-disk layout

FRAME_DIRS = ("source", "agnostic", "mask", "pose")


def write_sample(sample: SampleTuple, path) -> Path:
    path = Path(path)
    for d in FRAME_DIRS:
        (path / d).mkdir(parents=True, exist_ok=True)
    for f in range(sample.num_frames):
        name = f"frame_{f:04d}.png"
        Image.fromarray(sample.source[f]).save(path / "source" / name)
        Image.fromarray(sample.agnostic[f]).save(path / "agnostic" / name)
        Image.fromarray(sample.masks[f] * np.uint8(255)).save(path / "mask" / name)
        Image.fromarray(sample.pose[f]).save(path / "pose" / name)
    Image.fromarray(sample.garment).save(path / "garment.png")
    meta = dict(sample.meta, frames=sample.num_frames)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise LoadError(path, "missing file")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise LoadError(path, f"expected image mode {mode}, found {im.mode}")
            return np.asarray(im).copy()
    except LoadError:
        raise
    except Exception as e:  # PIL raises a zoo of types for truncated files
        raise LoadError(path, f"unreadable image ({e})") from e


def read_sample(path) -> SampleTuple:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise LoadError(meta_path, "missing file")
    try:
        meta = json.loads(meta_path.read_text())
        n = int(meta["frames"])
    except (ValueError, KeyError) as e:
        raise LoadError(meta_path, f"corrupt metadata ({e})") from e
    stacks = {d: [] for d in FRAME_DIRS}
    modes = {"source": "RGB", "agnostic": "RGB", "mask": "L", "pose": "RGB"}
    for f in range(n):
        for d in FRAME_DIRS:
            stacks[d].append(_read_png(path / d / f"frame_{f:04d}.png", modes[d]))
    for d in FRAME_DIRS:
        extra = sorted(p.name for p in (path / d).glob("frame_*.png"))[n:]
        if extra:
            raise LoadError(path / d, f"{len(extra)} frames beyond the {n} declared in meta.json")
    mask = np.stack(stacks["mask"])
    if not np.isin(mask, (0, 255)).all():
        raise LoadError(path / "mask", "mask images are not binary")
    meta.pop("frames")
    sample = SampleTuple(np.stack(stacks["source"]), np.stack(stacks["agnostic"]), (mask // 255).astype(np.uint8),
                         np.stack(stacks["pose"]), _read_png(path / "garment.png", "RGB"), meta)
    try:
        sample.validate(str(path))
    except ValidationError as e:
        raise LoadError(path, str(e)) from e
    return sample


def sample_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def generate_dataset(out, count: int, seed: int, cfg: SceneConfig | None = None) -> list[Path]:
    """Write `count` samples as out/sample_XXXXX, seeds derived from `seed`."""
    base = cfg or SceneConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(sample_seeds(seed, count)):
        cfg_i = SceneConfig(**{**asdict(base), "seed": s})
        sample = generate_scene(cfg_i)
        sample.meta["index"] = i
        paths.append(write_sample(sample, out / f"sample_{i:05d}"))
    return paths


class SyntheticDataset:
    """All samples of a dataset directory, held in memory as float tensors."""

    def __init__(self, root, limit: int | None = None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise LoadError(self.root, "dataset directory does not exist")
        dirs = sorted(p for p in self.root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
        if not dirs:
            raise LoadError(self.root, "no sample_* directories")
        self.paths = dirs[:limit]
        self.samples = [read_sample(p) for p in self.paths]
        self.items = [s.tensors() for s in self.samples]

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> dict[str, torch.Tensor]:
        return self.items[i]

    def order(self, shuffle_seed: int | None) -> list[int]:
        idx = np.arange(len(self))
        if shuffle_seed is not None:
            np.random.default_rng(shuffle_seed).shuffle(idx)
        return idx.tolist()
