"""Overfit experiment: 16 samples, guided training with and without TAS, silhouette IoU.

Both runs share the dataset, the codec and the pretrained base denoiser, so
the only difference is whether the text-attention update is applied during
guidance training.

    python3 scripts/overfit.py --out runs/overfit --seed 0
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from handgen.config import ExperimentConfig, load_config
from handgen.data import generate_dataset, load_dataset
from handgen.evalkit import eval_run, write_report
from handgen.training import load_checkpoint, run_codec_training, train


def run(out: Path, seed: int, n: int, steps: int | None, config: str | None, eval_steps: int | None) -> dict:
    cfg = load_config(config) if config else ExperimentConfig()
    cfg.train.seed = seed
    if steps is not None:
        cfg.train.steps = steps
    cfg.data_dir = str(out / "dataset")
    cfg.codec_ckpt = str(out / "codec.safetensors")
    timings = {}

    t0 = time.time()
    generate_dataset(n, seed, cfg.data_dir, cfg.data.image_size)
    samples = load_dataset(cfg.data_dir, cfg.data.crop_margin)
    codec, _ = run_codec_training(cfg)
    timings["codec_s"] = time.time() - t0

    results = {}
    base_ckpt = out / "tas_on" / "base.safetensors"
    for name, enabled in (("tas_on", True), ("tas_off", False)):
        t0 = time.time()
        cfg.tas.enabled = enabled
        cfg.out_dir = str(out / name)
        if enabled:
            train(cfg, samples, codec=codec)
        else:
            train(cfg, samples, resume=base_ckpt)
        timings[f"train_{name}_s"] = time.time() - t0
        t0 = time.time()
        model = load_checkpoint(Path(cfg.out_dir) / "last.safetensors").model
        report = eval_run(model, samples, n, seed, steps=eval_steps)
        write_report(report, Path(cfg.out_dir) / "report.json")
        timings[f"eval_{name}_s"] = time.time() - t0
        results[name] = report["mean_iou"]
        logging.info("%s mean IoU %.4f", name, report["mean_iou"])

    summary = {"seed": seed, "n": n, "steps": cfg.train.steps, "mean_iou": results, "timings": timings}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, help="guidance steps (default from config)")
    p.add_argument("--eval-steps", type=int, help="sampling steps (default: all T)")
    p.add_argument("--config")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    summary = run(Path(args.out), args.seed, args.n, args.steps, args.config, args.eval_steps)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
