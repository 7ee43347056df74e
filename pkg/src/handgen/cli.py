"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Errors are
printed to stderr as one line: ``ERROR <code>: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, load_config, save_config
from .data.crop import BBox, BBoxError
from .data.dataset import DatasetError, generate_dataset, load_dataset, load_png, save_png
from .data.render import PoseError
from .diffusion import ScheduleError
from .evalkit import EvalError, eval_run, export_attention_maps, write_report

OUT_DIR_ENV = "HANDGEN_OUT_DIR"

log = logging.getLogger("handgen")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _bbox(text: str) -> BBox:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"bbox must be four comma-separated numbers, got {text!r}") from None
    if len(parts) != 4:
        raise ValidationError(f"bbox must have 4 values x,y,w,h, got {len(parts)}")
    return BBox(*parts)


def _config(path: str):
    cfg = load_config(path)
    override = os.environ.get(OUT_DIR_ENV)
    if override:
        cfg.out_dir = override
    return cfg


def _load_model(path: str):
    from .training import load_checkpoint

    return load_checkpoint(path).model


def _mesh(path: str, size: int) -> np.ndarray:
    if not Path(path).exists():
        raise ValidationError(f"mesh image not found: {path}")
    img = load_png(path)
    if img.shape != (3, size, size):
        raise ValidationError(f"mesh image must be {size}x{size}, got {img.shape[1]}x{img.shape[2]}")
    return img


def cmd_prepare(args) -> None:
    out = os.environ.get(OUT_DIR_ENV) or args.out
    generate_dataset(args.n, args.seed, out, args.size)
    print(out)


def cmd_train_codec(args) -> None:
    from .training import run_codec_training

    cfg = _config(args.config)
    if args.seed is not None:
        cfg.codec.seed = args.seed
    _, path = run_codec_training(cfg, args.out)
    print(path)


def cmd_train(args) -> None:
    from .training import train

    cfg = _config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.no_tas:
        cfg.tas.enabled = False
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(cfg.out_dir) / "config.yaml")
    state = train(cfg, resume=args.resume)
    print(Path(cfg.out_dir) / "last.safetensors", state.step)


def cmd_generate(args) -> None:
    from .sampling import generate

    model = _load_model(args.ckpt)
    mesh = _mesh(args.mesh, model.cfg.data.image_size)
    img = generate(model, mesh, _bbox(args.bbox), args.prompt, steps=args.steps, seed=args.seed, tas=args.tas)
    out = Path(os.environ.get(OUT_DIR_ENV, ".")) / args.out if not Path(args.out).is_absolute() else Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(img, out)
    print(out)


def cmd_eval(args) -> None:
    model = _load_model(args.ckpt)
    samples = load_dataset(args.data, model.cfg.data.crop_margin)
    report = eval_run(model, samples, args.n, args.seed, steps=args.steps, tas=args.tas, out_dir=args.images)
    out = Path(os.environ.get(OUT_DIR_ENV, ".")) / args.out if not Path(args.out).is_absolute() else Path(args.out)
    write_report(report, out)
    print(f"mean_iou={report['mean_iou']:.4f} median_iou={report['median_iou']:.4f} -> {out}")


def cmd_attn(args) -> None:
    from .sampling import attention_at

    model = _load_model(args.ckpt)
    mesh = _mesh(args.mesh, model.cfg.data.image_size)
    refined, tokens = attention_at(model, mesh, _bbox(args.bbox), args.prompt, args.t, seed=args.seed, steps=args.steps)
    out = os.environ.get(OUT_DIR_ENV) or args.out
    paths = export_attention_maps(refined, tokens, out, model.cfg.data.image_size, args.name)
    for p in paths:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handgen", description="Mesh- and text-conditioned hand image diffusion at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="generate the synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="dataset")
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train-codec", help="fit the image latent codec")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="codec checkpoint path (default: codec_ckpt from the config)")
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train", help="pretrain the base denoiser and train the guidance module")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="model checkpoint to continue from")
    s.add_argument("--no-tas", action="store_true", help="disable the text-attention update during training")
    s.set_defaults(func=cmd_train)

    def sampling_args(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--mesh", required=True)
        s.add_argument("--bbox", required=True, help="x,y,w,h in pixels")
        s.add_argument("--prompt", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--steps", type=int)

    s = sub.add_parser("generate", help="sample one image")
    sampling_args(s)
    s.add_argument("--tas", action="store_true", help="apply the text-attention update at every sampling step")
    s.add_argument("--out", default="generated.png")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="silhouette-IoU report over dataset conditions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--tas", action="store_true")
    s.add_argument("--out", default="report.json")
    s.add_argument("--images", help="also write generated images here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attn", help="per-token attention heatmaps at a sampling timestep")
    sampling_args(s)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--out", default="attention")
    s.add_argument("--name", default="sample")
    s.set_defaults(func=cmd_attn)
    return p


VALIDATION_ERRORS = (ValidationError, ConfigError, BBoxError, PoseError, EvalError, ScheduleError, ValueError)
RUNTIME_ERRORS = (CheckpointError, DatasetError, RuntimeError, OSError, AssertionError)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"ERROR 1: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except RUNTIME_ERRORS as e:
        print(f"ERROR 2: {' '.join(str(e).split())}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"ERROR 1: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
