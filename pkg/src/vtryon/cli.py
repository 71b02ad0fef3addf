"""Command line entry point: gen-data, train, tryon, eval, inspect-attn.

Exit codes: 0 success, 1 invalid input (flags, config, shapes), 2 runtime or
state errors (missing/corrupt checkpoints and data, NaN losses).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import SEED_ENV, RunConfig, default_seed, load_config, parse_flat, parse_value
from .errors import LoadError, StateError, ValidationError

log = logging.getLogger("vtryon")

# config keys each subcommand reads; printed in --help
READS = {
    "gen-data": ["data.height", "data.width", "data.frames", "data.motion", "data.texture", "data.mask_area"],
    "train": RunConfig.keys(),
    "tryon": RunConfig.keys(["sample"]),
    "eval": RunConfig.keys(["sample"]),
    "inspect-attn": RunConfig.keys(["sample"]) + ["rasg.layers", "diffusion.T"],
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad flags map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _epilog(cmd: str) -> str:
    keys = "\n".join(f"  {k}" for k in READS[cmd])
    return (f"config keys read (set with --config FILE or --set key=value):\n{keys}\n\n"
            f"{SEED_ENV} sets the default seed when no seed is given.")


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable; applied after --config")


def _overrides(pairs) -> dict:
    out = {}
    for kv in pairs:
        key, sep, value = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        out[key.strip()] = parse_value(value)
    return out


def _parse_res(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--res expects WxH (e.g. 48x64), got {text!r}") from None
    return w, h


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    ap = _Parser(prog="vtryon", description=__doc__, formatter_class=fmt)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic five-tuple dataset", epilog=_epilog("gen-data"),
                       formatter_class=fmt)
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--count", type=int, default=200, help="number of samples")
    p.add_argument("--seed", type=int, default=None, help=f"dataset seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--frames", type=int, default=None, help="frames per sample (data.frames)")
    p.add_argument("--res", default=None, help="frame size WxH, e.g. 48x64 (data.width, data.height)")
    _add_config_flags(p)

    p = sub.add_parser("train", help="run the image or video training stage", epilog=_epilog("train"),
                       formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    p.add_argument("--out", type=Path, required=True, help="run directory (checkpoints, metrics.jsonl)")
    p.add_argument("--stage", choices=("image", "video"), default=None, help="train.stage")
    p.add_argument("--steps", type=int, default=None, help="train.steps")
    p.add_argument("--seed", type=int, default=None, help="train.seed")
    p.add_argument("--init", type=Path, default=None, help="image-stage checkpoint to start the video stage from")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint of the same stage to continue")
    _add_config_flags(p)

    p = sub.add_parser("tryon", help="generate a try-on video for one sample", epilog=_epilog("tryon"),
                       formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--sample", type=Path, required=True, help="sample directory (sample_XXXXX)")
    p.add_argument("--out", type=Path, required=True, help="output directory for frame_XXXX.png")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (sample.steps)")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (sample.seed)")
    p.add_argument("--no-composite", action="store_true", help="return raw decoder output inside and outside the mask")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a validation set", epilog=_epilog("eval"),
                       formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--data", type=Path, required=True, help="validation dataset directory")
    p.add_argument("--out", type=Path, required=True, help="JSON report path")
    p.add_argument("--csv", type=Path, default=None, help="optional per-sample CSV export")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (sample.steps)")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (sample.seed)")
    p.add_argument("--limit", type=int, default=None, help="evaluate only the first N samples")
    _add_config_flags(p)

    p = sub.add_parser("inspect-attn", help="dump garment-attention maps per supervised layer and frame",
                       epilog=_epilog("inspect-attn"), formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--sample", type=Path, required=True, help="sample directory (sample_XXXXX)")
    p.add_argument("--out", type=Path, required=True, help="output directory for PNGs and index.json")
    p.add_argument("--t", type=int, default=None, help="noise level of the probe forward (default T/2)")
    p.add_argument("--seed", type=int, default=None, help="noise seed (sample.seed)")
    _add_config_flags(p)
    return ap


def _sample_overrides(args) -> dict:
    """Checkpoint commands may only change sampling keys; the architecture comes from the file."""
    if args.config is not None and not args.config.is_file():
        raise LoadError(args.config, "config file not found")
    flat = parse_flat(args.config.read_text(), str(args.config)) if args.config else {}
    flat.update(_overrides(args.set))
    bad = [k for k in flat if not k.startswith("sample.")]
    if bad:
        raise UsageError(f"only sample.* keys can be overridden for a checkpoint, got {', '.join(bad)}")
    if getattr(args, "steps", None) is not None:
        flat["sample.steps"] = args.steps
    if args.seed is not None:
        flat["sample.seed"] = args.seed
    return flat


def _load(args):
    from .checkpoint import load_model

    return load_model(args.ckpt, _sample_overrides(args))


def _write_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def cmd_gen_data(args) -> None:
    from .synthdata import SceneConfig, generate_dataset

    over = _overrides(args.set)
    if args.frames is not None:
        over["data.frames"] = args.frames
    if args.res is not None:
        over["data.width"], over["data.height"] = _parse_res(args.res)
    cfg = load_config(args.config, over)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    seed = default_seed() if args.seed is None else args.seed
    d = cfg.data
    scene = SceneConfig(height=d.height, width=d.width, frames=d.frames, motion=d.motion,
                        texture=None if d.texture == "any" else d.texture, mask_area=tuple(d.mask_area))
    paths = generate_dataset(args.out, args.count, seed, scene)
    cfg.save(args.out / "config.txt")
    log.info("wrote %d samples to %s", len(paths), args.out)


def cmd_train(args) -> None:
    from .training import train_stage

    over = _overrides(args.set)
    for flag, key in (("stage", "train.stage"), ("steps", "train.steps"), ("seed", "train.seed")):
        if getattr(args, flag) is not None:
            over[key] = getattr(args, flag)
    cfg = load_config(args.config, over)
    if not args.data.is_dir():
        raise LoadError(args.data, "dataset directory does not exist")
    ckpt = train_stage(cfg, args.data, args.out, resume=args.resume, init=args.init)
    print(ckpt)


def cmd_tryon(args) -> None:
    from .network import generate
    from .synthdata import read_sample

    model, cfg, sched, _ = _load(args)
    sample = read_sample(args.sample).tensors()
    s = cfg.sample
    frames = generate(model, sample, s.steps, sched, seed=s.seed, composite=s.composite and not args.no_composite,
                      clip=s.clip_latents)
    args.out.mkdir(parents=True, exist_ok=True)
    for f in range(frames.shape[0]):
        _write_png(frames[f].permute(1, 2, 0).numpy(), args.out / f"frame_{f:04d}.png")
    cfg.save(args.out / "config.txt")
    log.info("wrote %d frames to %s", frames.shape[0], args.out)


def cmd_eval(args) -> None:
    from .synthdata import SyntheticDataset
    from .training import evaluate_model, write_report

    model, cfg, sched, _ = _load(args)
    data = SyntheticDataset(args.data)
    s = cfg.sample
    report = evaluate_model(model, sched, data, s.steps, s.seed, s.composite, s.clip_latents, args.limit)
    report["checkpoint"] = str(args.ckpt)
    report = write_report(report, args.out, args.csv)
    cfg.save(args.out.parent / "config.txt")
    agg = report["aggregate"]
    print(json.dumps({k: agg[k]["mean"] for k in ("ssim", "ssim_edit", "baseline_ssim_edit", "psnr", "flicker")}))


def cmd_inspect_attn(args) -> None:
    from .diffusion import q_sample
    from .guidance import AttentionRecorder, attention_iou
    from .network import batch_of
    from .synthdata import read_sample
    from .temporal import sample_clip_pairs

    model, cfg, sched, _ = _load(args)
    sample = read_sample(args.sample).tensors()
    t = sched.num_steps // 2 if args.t is None else args.t
    sched.check_timestep(t)
    model.eval()
    batch = batch_of(sample)
    n = sample["source"].shape[0]
    gen = torch.Generator().manual_seed(cfg.sample.seed)
    with torch.no_grad():
        x0 = model.encode_images(batch["source"])
        x_t = q_sample(x0, torch.tensor([t]), torch.randn(x0.shape, generator=gen), sched)
        rec = AttentionRecorder(cfg.rasg.layers)
        pairs = sample_clip_pairs(n, np.random.default_rng(cfg.sample.seed))
        out = model(x_t, torch.tensor([t]), model.encode_condition(batch), pairs, rec)
    args.out.mkdir(parents=True, exist_ok=True)
    H, W = sample["source"].shape[-2:]
    entries = []
    for r in out.attention:
        probs = r.probs if r.probs.ndim == 3 else r.probs.unsqueeze(0)
        big = torch.nn.functional.interpolate(probs[:, None].float(), size=(H, W), mode="nearest")[:, 0]
        for f, frame in zip(r.frames(), big):
            name = f"{r.layer_id}_frame_{int(f):04d}.png"
            _write_png(frame.numpy(), args.out / name)
            entries.append({"layer": r.layer_id, "frame": int(f), "file": name,
                            "grid": list(probs.shape[-2:]), "max": float(probs[int(f)].max())})
    index = {"checkpoint": str(args.ckpt), "sample": str(args.sample), "t": t, "layers": cfg.rasg.layers,
             "frames": n, "iou": attention_iou(out.attention, sample["mask"]), "maps": entries}
    (args.out / "index.json").write_text(json.dumps(index, indent=2))
    cfg.save(args.out / "config.txt")
    log.info("wrote %d attention maps to %s", len(entries), args.out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "tryon": cmd_tryon, "eval": cmd_eval,
            "inspect-attn": cmd_inspect_attn}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (StateError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
