"""``tivdiff`` command-line entry point.

Exit codes: 0 success, 1 invalid configuration or input, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .config import SLOTS_FOR_VARIANT, ConfigError, JsonLog, RunConfig
from .errors import DatasetError, NumericalError, RejectedInput


def _common(p):
    p.add_argument("--config", help="JSON file of dotted keys (flags override it)")
    p.add_argument("--seed", type=int, help="global seed (falls back to $TIV_SEED, then 0)")
    p.add_argument("--log", help="append JSON-lines log records to this file")


def build_parser():
    parser = argparse.ArgumentParser(prog="tivdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="synthesize a Moving-MNIST variant")
    _common(p)
    p.add_argument("--variant", choices=["single", "double", "modified"])
    p.add_argument("--count", type=int)
    p.add_argument("--split", type=float, help="train fraction")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-slots", help="pretrain the slot autoencoder")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("viz-slots", help="render per-slot decodes of one image")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PNG/NPY image, or a dataset .f32 file (frame 0)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the video diffusion model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--slots-ckpt", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="generate frames from an image and caption")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--eta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score generated videos against a test split")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--limit", type=int, help="score only the first N items")
    p.add_argument("--report", required=True)

    p = sub.add_parser("interp-scale", help="sample with the modulation scale blended between two captions")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption-a", required=True)
    p.add_argument("--caption-b", required=True)
    p.add_argument("--omega", type=float, nargs="+", required=True)
    p.add_argument("--eta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    return parser


def _run_config(args, **flag_keys):
    overrides = {"seed": args.seed}
    overrides.update({k: getattr(args, a) for k, a in flag_keys.items()})
    return RunConfig.load(args.config, overrides)


def _seed_all(seed):
    import random

    import torch

    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def load_image(path):
    """A single (1, 1, H, W) float tensor in [0, 1]."""
    import torch

    from .data import read_frames

    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: image not found")
    if path.suffix == ".f32":
        img = read_frames(path)[0, :, :, 0]
    elif path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        img = img.reshape(img.shape[-3:-1]) if img.ndim == 3 and img.shape[-1] == 1 else img
    else:
        from PIL import Image

        img = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / np.float32(255.0)
    if img.ndim != 2:
        raise RejectedInput(f"{path}: expected a single-channel image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_video(out, frames, first, meta):
    """Per-frame PNGs, an animated GIF, a strip figure, raw frames and metadata."""
    from PIL import Image

    from . import plotting
    from .data import write_frames

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    imgs = []
    for n, f in enumerate(frames, start=1):
        im = Image.fromarray(np.round(f.reshape(f.shape[-2:]) * 255).astype(np.uint8), mode="L")
        im.save(out / f"frame_{n:02d}.png")
        imgs.append(im)
    first_im = Image.fromarray(np.round(first.reshape(first.shape[-2:]) * 255).astype(np.uint8), mode="L")
    first_im.save(out / "frame_00.png")
    first_im.save(out / "video.gif", save_all=True, append_images=imgs, duration=150, loop=0)
    plotting.frame_strip(frames, out / "strip.png", first=first)
    write_frames(out / "frames.f32", np.asarray(frames, dtype=np.float32).reshape(len(frames), *first.shape[-2:], 1))
    _write_json(out / "meta.json", meta)


def cmd_gen_data(args, cfg, log):
    from .data import synth_dataset, write_dataset

    samples = synth_dataset(cfg["data.variant"], cfg["data.count"], cfg["seed"], cfg["data.workers"])
    manifest = write_dataset(samples, args.out, cfg["data.split"], cfg["seed"], cfg.hash())
    _write_json(Path(args.out) / "config.json", cfg.to_json())
    log({"event": "gen_data", "count": manifest.count, "variant": manifest.variant, "out": str(args.out)})


def _frames_tensor(samples, frame=0):
    import torch

    return torch.from_numpy(np.stack([s.frames[frame] for s in samples])).permute(0, 3, 1, 2).contiguous()


def cmd_train_slots(args, cfg, log):
    from . import plotting
    from .checkpoints import save_slots
    from .data import read_dataset, read_manifest
    from .slots import pretrain_slot_autoencoder, reconstruction_mse

    variant = read_manifest(args.data).variant
    if "slots.num_slots" not in cfg.explicit and variant in SLOTS_FOR_VARIANT:
        cfg.set("slots.num_slots", SLOTS_FOR_VARIANT[variant])
    samples = read_dataset(args.data, split="train")
    x = _frames_tensor(samples)
    model, losses = pretrain_slot_autoencoder(
        x, cfg["train_slots.steps"], cfg["train_slots.lr"], cfg.slot_config(), cfg["train_slots.batch_size"],
        cfg["seed"], log=log, log_every=cfg["log.every"])
    save_slots(args.out, model, cfg.hash(), losses, frozen=True, run_config=cfg.to_json())
    plotting.loss_curve(losses, Path(args.out).with_suffix(".loss.png"), "slot reconstruction loss")
    log({"event": "train_slots_done", "mse": reconstruction_mse(model, x), "out": str(args.out)})


def cmd_viz_slots(args, cfg, log):
    import torch

    from . import plotting
    from .checkpoints import load_slots

    model, _ = load_slots(args.ckpt)
    img = load_image(args.image)
    with torch.no_grad():
        slots = model.encoder(img, deterministic=True)
        recon, masks, contents = model.decoder(slots)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plotting.slot_panels(img[0], recon[0], masks[0].numpy(), contents[0].numpy(), args.out)
    log({"event": "viz_slots", "out": str(args.out)})


def cmd_train(args, cfg, log):
    import torch

    from . import plotting
    from .checkpoints import load_slots, save_model
    from .data import read_dataset
    from .model import TIVDiffusion, train_diffusion
    from .slots import parameter_hash

    slot_ae, slot_meta = load_slots(args.slots_ckpt)
    if not slot_meta["frozen"]:
        raise RejectedInput(f"{args.slots_ckpt}: slot encoder is not marked frozen")
    encoder = slot_ae.freeze_encoder()
    before = parameter_hash(encoder)
    torch.manual_seed(cfg["seed"])
    model = TIVDiffusion(cfg.model_config(slot_ae.cfg), slot_encoder=encoder)
    samples = read_dataset(args.data, split="train")
    losses = train_diffusion(model, samples, cfg["train.steps"], cfg["train.lr"], cfg["train.batch_size"],
                             cfg["seed"], cfg["train.warmup"], log=log, log_every=cfg["log.every"])
    after = parameter_hash(model.slot_encoder)
    if after != before:
        raise NumericalError("slot encoder parameters changed during diffusion training")
    save_model(args.out, model, cfg.hash(), len(losses), losses, cfg.to_json(), after)
    plotting.loss_curve(losses, Path(args.out).with_suffix(".loss.png"), "diffusion loss")
    log({"event": "train_done", "final_loss": losses[-1] if losses else None, "out": str(args.out)})


def cmd_sample(args, cfg, log):
    import torch

    from .checkpoints import load_model
    from .model import sample_video

    model, meta = load_model(args.ckpt)
    img = load_image(args.image)
    gen = torch.Generator().manual_seed(cfg["seed"])
    frames = sample_video(model, img, [args.caption], torch.tensor([cfg["sample.eta"]]),
                          cfg["sample.steps"], gen)[0].numpy()
    _write_video(args.out, frames, img[0].numpy(), {
        "format_version": FORMAT_VERSION, "config_hash": cfg.hash(), "checkpoint_config_hash": meta["config_hash"],
        "caption": args.caption, "eta": cfg["sample.eta"], "steps": cfg["sample.steps"], "seed": cfg["seed"],
    })
    log({"event": "sample", "out": str(args.out)})


def cmd_eval(args, cfg, log):
    from . import plotting
    from .checkpoints import load_model
    from .data import read_dataset
    from .metrics import evaluate

    model, meta = load_model(args.ckpt)
    samples = read_dataset(args.data, split=None if args.split == "all" else args.split)
    if args.limit is not None:
        samples = samples[:args.limit]
    report = evaluate(model, samples, cfg["sample.steps"], cfg["seed"], cfg.hash())
    report.sampler["checkpoint_config_hash"] = meta["config_hash"]
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    plotting.per_frame_metrics(report, out.with_suffix(".png"))
    log({"event": "eval", "psnr": report.mean_psnr, "ssim": report.mean_ssim, "count": report.count})


def cmd_interp_scale(args, cfg, log):
    import torch

    from . import plotting
    from .checkpoints import load_model
    from .model import interpolated_condition, sample_video

    model, meta = load_model(args.ckpt)
    img = load_image(args.image)
    eta = torch.tensor([cfg["sample.eta"]])
    videos = {}
    for w in args.omega:
        cond = interpolated_condition(model, img, args.caption_a, args.caption_b, eta, w)
        gen = torch.Generator().manual_seed(cfg["seed"])
        frames = sample_video(model, img, None, eta, cfg["sample.steps"], gen, cond=cond)[0].numpy()
        videos[w] = frames
        _write_video(Path(args.out) / f"omega_{w:g}", frames, img[0].numpy(), {
            "format_version": FORMAT_VERSION, "config_hash": cfg.hash(),
            "checkpoint_config_hash": meta["config_hash"], "caption_a": args.caption_a,
            "caption_b": args.caption_b, "omega": w, "eta": cfg["sample.eta"], "steps": cfg["sample.steps"],
            "seed": cfg["seed"],
        })
    plotting.interp_grid(videos, img[0].numpy(), Path(args.out) / "interp.png")
    log({"event": "interp_scale", "omegas": list(args.omega), "out": str(args.out)})


COMMANDS = {
    "gen-data": (cmd_gen_data, {"data.variant": "variant", "data.count": "count", "data.split": "split",
                                "data.workers": "workers"}),
    "train-slots": (cmd_train_slots, {"train_slots.steps": "steps", "train_slots.lr": "lr",
                                      "train_slots.batch_size": "batch_size"}),
    "viz-slots": (cmd_viz_slots, {}),
    "train": (cmd_train, {"train.steps": "steps", "train.lr": "lr", "model.T": "T",
                          "train.batch_size": "batch_size"}),
    "sample": (cmd_sample, {"sample.eta": "eta", "sample.steps": "steps"}),
    "eval": (cmd_eval, {"sample.steps": "steps"}),
    "interp-scale": (cmd_interp_scale, {"sample.eta": "eta", "sample.steps": "steps"}),
}


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    fn, keys = COMMANDS[args.command]
    try:
        cfg = _run_config(args, **keys)
        log = JsonLog(args.log, command=args.command, config_hash=cfg.hash())
        _seed_all(cfg["seed"])
        fn(args, cfg, log)
    except ConfigError as e:
        print(f"tivdiff: invalid config: {e}", file=sys.stderr)
        return 1
    except (RejectedInput, DatasetError, NumericalError) as e:
        print(f"tivdiff: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

