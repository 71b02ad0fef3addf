"""Two-stage trainer (single frames, then clips with only temporal layers trainable) and evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import guidance
from .checkpoint import load_model, read_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import NoiseSchedule, ldm_loss, make_schedule, minsnr_weight, q_sample
from .errors import StateError, ValidationError
from .metrics import feature_distance, flicker, masked_ssim, psnr, ssim, summarize
from .network import TryOnModel, batch_of, generate
from .synthdata import SyntheticDataset
from .temporal import sample_clip_pairs

log = logging.getLogger(__name__)

# Reference values for full-resolution training; the toy defaults in TrainConfig differ.
FULL_SCALE = {"batch_size": 8, "lr": 1e-5, "betas": (0.9, 0.999), "gamma": 5.0,
              "image_steps": 60_000, "video_steps": 30_000, "clip_length": 24}


def build_model(cfg: RunConfig) -> TryOnModel:
    torch.manual_seed(cfg.train.seed)
    return TryOnModel(cfg)


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end)


def param_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _stack_batch(items: list[dict]) -> dict:
    return {k: torch.stack([it[k] for it in items]) for k in items[0]}


RGB_KEYS = ("source", "agnostic", "garment")


def augment(item: dict, rng: np.random.Generator) -> dict:
    """Random horizontal flip and RGB channel permutation, applied alike to every image of one sample."""
    perm = torch.from_numpy(rng.permutation(3))
    flip = bool(rng.integers(2))
    out = {}
    for k, v in item.items():
        if k in RGB_KEYS:
            v = v.index_select(-3, perm)
        out[k] = v.flip(-1) if flip else v
    return out


@dataclass
class StepResult:
    loss: float
    loss_total: float
    loss_ldm: float
    loss_rasg: float
    loss_recon: float
    weights: list


class Trainer:
    """Owns model, optimizer and all RNG state for one training stage."""

    def __init__(self, cfg: RunConfig, data: SyntheticDataset, out_dir=None, model: TryOnModel | None = None):
        self.cfg = cfg
        self.data = data
        self.out = Path(out_dir) if out_dir is not None else None
        self.stage = cfg.train.stage
        self.model = model if model is not None else build_model(cfg)
        self.sched = schedule_for(cfg)
        self.step = 0
        self.rng = np.random.default_rng(cfg.train.seed)
        self.gen = torch.Generator().manual_seed(cfg.train.seed)
        self.fixed_pairs = None
        self._configure_trainable()
        t = cfg.train
        self.optimizer = torch.optim.Adam(self.trainable, lr=t.lr, betas=(t.beta1, t.beta2),
                                          weight_decay=t.weight_decay)

    def _configure_trainable(self) -> None:
        temporal = {id(p) for p in self.model.temporal_parameters()}
        video = self.stage == "video"
        if video and not temporal:
            raise ValidationError("video stage needs temporal layers (atff.enabled = true)")
        for p in self.model.parameters():
            p.requires_grad_((id(p) in temporal) == video)
        self.trainable = [p for p in self.model.parameters() if p.requires_grad]

    # ---------------------------------------------------------------- state

    def rng_state(self) -> dict:
        return {"numpy": self.rng.bit_generator.state, "torch": self.gen.get_state()}

    def set_rng_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["numpy"]
        self.gen.set_state(state["torch"])

    def save(self, path) -> Path:
        return save_checkpoint(path, self.model, self.cfg, self.sched, self.step, self.stage,
                               self.optimizer, self.rng_state())

    def resume(self, path) -> None:
        payload = read_checkpoint(path)
        if payload["stage"] != self.stage:
            raise StateError(f"{path}: checkpoint is from stage {payload['stage']!r}, not {self.stage!r}")
        if payload.get("optimizer") is None or payload.get("rng") is None:
            raise StateError(f"{path}: checkpoint has no optimizer/RNG state to resume from")
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.set_rng_state(payload["rng"])
        self.step = payload["step"]
        self.model.trained_steps = payload["trained_steps"]

    def init_from(self, path) -> None:
        """Start the video stage from image-stage weights."""
        payload = read_checkpoint(path)
        if payload["stage"] != "image":
            raise StateError(f"{path}: video fine-tuning needs an image-stage checkpoint, got {payload['stage']!r}")
        self.model.load_state_dict(payload["model"])
        self.model.trained_steps = payload["trained_steps"]

    # ---------------------------------------------------------------- batches

    def next_batch(self) -> dict:
        t, n_data = self.cfg.train, len(self.data)
        if self.stage == "image":
            idx = self.rng.integers(n_data, size=t.batch_size)
            items = []
            for i in idx:
                s = self.data[int(i)]
                f = int(self.rng.integers(s["source"].shape[0]))
                items.append({"source": s["source"][f:f + 1], "agnostic": s["agnostic"][f:f + 1],
                              "mask": s["mask"][f:f + 1], "pose": s["pose"][f:f + 1], "garment": s["garment"]})
            return self._collate(items)
        n = self.cfg.data.frames
        idx = self.rng.integers(n_data, size=t.clips_per_batch)
        items = []
        for i in idx:
            s = self.data[int(i)]
            total = s["source"].shape[0]
            if total < n:
                raise ValidationError(f"sample {int(i)} has {total} frames, clip length is {n}")
            start = int(self.rng.integers(total - n + 1))
            items.append({k: (v if k == "garment" else v[start:start + n]) for k, v in s.items()})
        return self._collate(items)

    def _collate(self, items: list[dict]) -> dict:
        if self.cfg.train.augment:
            items = [augment(it, self.rng) for it in items]
        return _stack_batch(items)

    def frame_pairs(self, n: int) -> torch.Tensor:
        if self.cfg.atff.seed_policy == "fixed":
            if self.fixed_pairs is None or self.fixed_pairs.shape[0] != n:
                self.fixed_pairs = sample_clip_pairs(n, np.random.default_rng(self.cfg.train.seed))
            return self.fixed_pairs
        return sample_clip_pairs(n, self.rng)

    # ---------------------------------------------------------------- step

    def losses(self, batch: dict):
        cfg, model = self.cfg, self.model
        b, n = batch["source"].shape[:2]
        with torch.no_grad():
            x0 = model.encode_images(batch["source"], normalized=False)
            if self.stage == "image" and cfg.train.latent_momentum > 0:
                # the first step adopts the batch statistics outright
                model.track_latent_stats(x0, 1.0 if model.trained_steps == 0 else cfg.train.latent_momentum)
            x0 = model.normalize(x0)
        t = torch.randint(0, self.sched.num_steps, (b,), generator=self.gen)
        eps = torch.randn(x0.shape, generator=self.gen)
        x_t = q_sample(x0, t, eps, self.sched)
        cond = model.encode_condition(batch)
        use_rasg = cfg.rasg.enabled and cfg.rasg.lambda_r > 0
        recorder = guidance.AttentionRecorder(cfg.rasg.layers) if use_rasg else None
        pairs = self.frame_pairs(n) if cfg.atff.enabled else None
        out = model(x_t, t, cond, pairs, recorder)
        weights = minsnr_weight(t, self.sched, cfg.diffusion.gamma).float()
        l_ldm = ldm_loss(out.eps_pred, eps, weights)
        l_rasg = torch.zeros(())
        if use_rasg:
            l_rasg = guidance.rasg_loss(out.attention, batch["mask"].flatten(0, 1), cfg.rasg.lambda_n)
        l_total = guidance.total_loss(l_ldm, l_rasg, cfg.rasg.lambda_r)
        l_recon = torch.zeros(())
        if self.stage == "image" and cfg.train.recon_weight > 0:
            imgs = torch.cat([batch["source"].flatten(0, 1), batch["garment"]])
            z = model.ae.encode(imgs)
            l_recon = (model.ae.decode(z) - imgs).abs().mean()
            # per-channel zero mean / unit variance, so the noise schedule's SNR applies to the latents as-is
            mu, var = z.mean(dim=(0, 2, 3)), z.var(dim=(0, 2, 3))
            l_recon = l_recon + cfg.train.latent_reg * (mu.pow(2) + (var - 1).pow(2)).mean()
        return l_total, l_ldm, l_rasg, l_recon, weights

    def train_step(self) -> StepResult:
        self.model.train()
        batch = self.next_batch()
        l_total, l_ldm, l_rasg, l_recon, weights = self.losses(batch)
        loss = l_total + self.cfg.train.recon_weight * l_recon
        if not torch.isfinite(loss):
            snap = self._nan_snapshot()
            raise StateError(f"non-finite loss at step {self.step} (ldm={l_ldm.item()}, rasg={l_rasg.item()}, "
                             f"recon={l_recon.item()}); snapshot: {snap}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self.model.trained_steps += 1
        return StepResult(loss.item(), l_total.item(), l_ldm.item(), l_rasg.item(), l_recon.item(),
                          weights.tolist())

    def _nan_snapshot(self):
        if self.out is None:
            return None
        return str(self.save(self.out / f"nan_step_{self.step:06d}.pt"))

    def run(self, steps: int | None = None, log_file=None) -> Path | None:
        """Train until `steps` total steps (default train.steps); checkpoint and log on cadence."""
        target = self.cfg.train.steps if steps is None else steps
        t = self.cfg.train
        metrics = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            self.cfg.save(self.out / "config.txt")
            metrics = open(log_file or self.out / "metrics.jsonl", "a")
        t0 = time.time()
        try:
            while self.step < target:
                r = self.train_step()
                if metrics is not None and (self.step % t.log_every == 0 or self.step == target):
                    rec = {"step": self.step, "stage": self.stage, "loss": r.loss, "loss_total": r.loss_total,
                           "loss_ldm": r.loss_ldm, "loss_rasg": r.loss_rasg, "loss_recon": r.loss_recon,
                           "minsnr_weights": r.weights, "elapsed": round(time.time() - t0, 3),
                           "time": time.time()}
                    metrics.write(json.dumps(rec) + "\n")
                    metrics.flush()
                if self.out is not None and t.ckpt_every and self.step % t.ckpt_every == 0:
                    self.save(self.out / f"ckpt_{self.stage}_{self.step:06d}.pt")
        finally:
            if metrics is not None:
                metrics.close()
        if self.out is None:
            return None
        return self.save(self.out / f"{self.stage}_last.pt")


def train_stage(cfg: RunConfig, data_dir, out_dir, resume=None, init=None) -> Path:
    """Run one stage end to end and return the final checkpoint path."""
    data = SyntheticDataset(data_dir)
    trainer = Trainer(cfg, data, out_dir)
    if cfg.train.stage == "video":
        if resume is None and init is None:
            raise StateError("video stage needs an image-stage checkpoint (init) or a video checkpoint (resume)")
    if init is not None and resume is None:
        trainer.init_from(init)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


# -------------------------------------------------------------------- evaluation

def naive_paste(sample: dict) -> torch.Tensor:
    """Garment image pasted into the mask, no deformation."""
    m = sample["mask"].unsqueeze(1)
    return m * sample["garment"].unsqueeze(0) + (1 - m) * sample["source"]


def latent_features(model: TryOnModel):
    """Per-frame features (channel mean and std of the latent) from the toy encoder."""
    @torch.no_grad()
    def extract(frames: torch.Tensor) -> np.ndarray:
        z = model.ae.encode(frames)
        return torch.cat([z.mean(dim=(-2, -1)), z.std(dim=(-2, -1))], dim=1).double().numpy()

    return extract


def _hwc(x: torch.Tensor) -> np.ndarray:
    return x.permute(1, 2, 0).double().numpy()


def score_video(gen: torch.Tensor, sample: dict, extractor=None) -> dict:
    truth, masks = sample["source"], sample["mask"]
    n = truth.shape[0]
    s = [ssim(_hwc(gen[f]), _hwc(truth[f])) for f in range(n)]
    se = [masked_ssim(_hwc(gen[f]), _hwc(truth[f]), masks[f].numpy()) for f in range(n)]
    p = [psnr(_hwc(gen[f]), _hwc(truth[f])) for f in range(n)]
    rec = {"ssim": float(np.mean(s)), "ssim_edit": float(np.nanmean(se)),
           "psnr": float(np.mean(p)) if all(map(math.isfinite, p)) else math.inf,
           "flicker": flicker(gen.double().numpy(), truth.double().numpy()) if n >= 2 else None}
    if extractor is not None and n >= 2:
        rec["feature_distance"] = feature_distance(gen, truth, extractor)
    return rec


def evaluate_model(model: TryOnModel, sched: NoiseSchedule, data: SyntheticDataset, steps: int, seed: int,
                   composite: bool = True, clip: float | None = None, limit: int | None = None) -> dict:
    extractor = latent_features(model)
    per_sample = []
    for i in range(len(data) if limit is None else min(limit, len(data))):
        sample = data[i]
        gen = generate(model, sample, steps, sched, seed=seed + i, composite=composite, clip=clip)
        rec = {"sample": data.paths[i].name, **score_video(gen, sample, extractor)}
        base = score_video(naive_paste(sample), sample)
        rec["baseline_ssim"] = base["ssim"]
        rec["baseline_ssim_edit"] = base["ssim_edit"]
        per_sample.append(rec)
    keys = ("ssim", "ssim_edit", "psnr", "flicker", "feature_distance", "baseline_ssim", "baseline_ssim_edit")
    aggregate = {k: summarize(r.get(k) for r in per_sample) for k in keys}
    return {"samples": per_sample, "aggregate": aggregate, "steps": steps, "seed": seed,
            "trained_steps": model.trained_steps}


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None  # PSNR_IDENTICAL and friends
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def evaluate_checkpoint(ckpt, valset, out_path=None, steps: int | None = None, seed: int | None = None,
                        limit: int | None = None, csv_path=None) -> dict:
    model, cfg, sched, _ = load_model(ckpt)
    data = valset if isinstance(valset, SyntheticDataset) else SyntheticDataset(valset)
    s = cfg.sample
    report = evaluate_model(model, sched, data, steps or s.steps, s.seed if seed is None else seed,
                            s.composite, s.clip_latents, limit)
    report["checkpoint"] = str(ckpt)
    return write_report(report, out_path, csv_path)


REPORT_COLUMNS = ["sample", "ssim", "ssim_edit", "psnr", "flicker", "feature_distance",
                  "baseline_ssim", "baseline_ssim_edit"]


def write_report(report: dict, out_path=None, csv_path=None) -> dict:
    """JSON-safe copy of the report (non-finite floats become null), optionally written to disk."""
    report = _json_safe(report)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(report, indent=2))
    if csv_path is not None:
        lines = [",".join(REPORT_COLUMNS)] + [
            ",".join("" if r.get(c) is None else str(r.get(c)) for c in REPORT_COLUMNS) for r in report["samples"]]
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_path).write_text("\n".join(lines) + "\n")
    return report


@torch.no_grad()
def attention_iou_on(model: TryOnModel, sched: NoiseSchedule, data: SyntheticDataset, t: int | None = None,
                     seed: int = 0, limit: int | None = None, threshold: float = 0.5) -> float:
    """Mean IoU of thresholded garment-attention maps vs masks, one noisy forward per sample.

    t defaults to the middle of the schedule.
    """
    t = sched.num_steps // 2 if t is None else t
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    ious = []
    for i in range(len(data) if limit is None else min(limit, len(data))):
        batch = batch_of(data[i])
        x0 = model.encode_images(batch["source"])
        x_t = q_sample(x0, torch.tensor([t]), torch.randn(x0.shape, generator=gen), sched)
        rec = guidance.AttentionRecorder(model.cfg.rasg.layers)
        pairs = sample_clip_pairs(x0.shape[1], np.random.default_rng(seed))
        out = model(x_t, torch.tensor([t]), model.encode_condition(batch), pairs, rec)
        ious.append(guidance.attention_iou(out.attention, batch["mask"].flatten(0, 1), threshold))
    return float(np.mean(ious))


@torch.no_grad()
def ldm_probe(model: TryOnModel, sched: NoiseSchedule, data: SyntheticDataset, batches: int = 16,
              seed: int = 0) -> list[float]:
    """Unweighted noise-prediction loss on a fixed stream of (clip, t, noise) draws.

    The same seed gives the same draws for any model, so trained and untrained
    weights can be compared batch by batch.
    """
    model.eval()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(batches):
        batch = batch_of(data[int(rng.integers(len(data)))])
        x0 = model.encode_images(batch["source"])
        t = torch.randint(0, sched.num_steps, (1,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        pairs = sample_clip_pairs(x0.shape[1], rng)
        pred = model(q_sample(x0, t, eps, sched), t, model.encode_condition(batch), pairs).eps_pred
        out.append(ldm_loss(pred, eps).item())
    return out
