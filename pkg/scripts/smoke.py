"""Smoke pipeline through the CLI: prepare, train-codec, train, generate, eval, attn.

Every artifact lands under --out, so two runs with the same seed can be
compared file by file.

    python3 scripts/smoke.py --out runs/smoke_check --seed 0
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import yaml

from handgen.cli import main as cli

SMOKE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.yaml"


def _cli(*argv) -> None:
    code = cli([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"handgen {argv[0]} failed with exit code {code}")


def run(out: Path, seed: int = 0, n: int = 4, sample_steps: int = 20) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    raw = yaml.safe_load(SMOKE_CONFIG.read_text())
    raw.update(data_dir="dataset", out_dir="run", codec_ckpt="codec.safetensors")
    config = out / "smoke.yaml"
    config.write_text(yaml.safe_dump(raw, sort_keys=True))

    _cli("prepare", "--n", n, "--seed", seed, "--out", out / "dataset")
    _cli("train-codec", "--config", config, "--seed", seed)
    _cli("train", "--config", config, "--seed", seed)

    ckpt = out / "run" / "last.safetensors"
    first = json.loads((out / "dataset" / "samples.jsonl").read_text().splitlines()[0])
    cond = [
        "--ckpt", ckpt,
        "--mesh", out / "dataset" / "mesh" / f"{first['id']}.png",
        "--bbox", ",".join(str(v) for v in first["bbox"]),
        "--prompt", first["prompt"],
        "--seed", seed,
        "--steps", sample_steps,
    ]
    _cli("generate", *cond, "--out", out / "generated.png")
    _cli("generate", *cond, "--tas", "--out", out / "generated_tas.png")
    _cli("eval", "--ckpt", ckpt, "--data", out / "dataset", "--n", n, "--seed", seed,
         "--steps", sample_steps, "--out", out / "report.json", "--images", out / "eval_images")
    _cli("attn", *cond, "--t", 50, "--out", out / "attention", "--name", first["id"])
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke_check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=4)
    args = p.parse_args()
    print(run(Path(args.out), args.seed, args.n))


if __name__ == "__main__":
    main()
