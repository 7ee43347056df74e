"""Desk-scale evaluation: silhouette alignment, attention heatmaps, run reports."""
from __future__ import annotations

import json
import statistics
from pathlib import Path

import numpy as np
import torch

from .data.dataset import Sample, save_png
from .model import HandDiffusion
from .sampling import generate
from .tas import RefinedAttention

REPORT_VERSION = 1
FOREGROUND_THRESHOLD = 0.2


class EvalError(ValueError):
    pass


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of a 3xHxW image."""
    img = np.asarray(img, dtype=np.float64)
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def foreground(img: np.ndarray, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    return luminance(img) > threshold


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise EvalError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def silhouette_iou(generated: np.ndarray, condition: np.ndarray, threshold: float = FOREGROUND_THRESHOLD) -> float:
    """IoU of the luminance-thresholded foregrounds of two 3xHxW images."""
    generated, condition = np.asarray(generated), np.asarray(condition)
    if generated.shape != condition.shape:
        raise EvalError(f"image sizes differ: {generated.shape} vs {condition.shape}")
    return mask_iou(foreground(generated, threshold), foreground(condition, threshold))


def token_heatmaps(refined: RefinedAttention, item: int = 0) -> np.ndarray:
    """NxHxW spatial maps, each scaled so its maximum is 1.

    Hand tokens use their refined maps; other tokens the spatial softmax of
    their logits.
    """
    a_hat = refined.A_hat[item].detach().double()
    n = a_hat.shape[-1]
    maps = []
    for k in range(n):
        col = a_hat[..., k]
        if not refined.hand_mask[item, k]:
            if not refined.token_mask[item, k]:
                maps.append(torch.zeros_like(col))
                continue
            col = torch.softmax(col.flatten(), 0).reshape(col.shape)
        maps.append(col / col.max())
    return torch.stack(maps).numpy()


def export_attention_maps(
    refined: RefinedAttention,
    tokens: list[str],
    out_dir: str | Path,
    image_size: int = 64,
    sample_id: str = "sample",
    item: int = 0,
) -> list[Path]:
    """Write one grayscale PNG per token, nearest-neighbour upsampled to ``image_size``."""
    maps = token_heatmaps(refined, item)
    if len(tokens) > maps.shape[0]:
        raise EvalError(f"{len(tokens)} tokens but only {maps.shape[0]} attention columns")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise EvalError(f"cannot write heatmaps to {out}: {e}") from e
    h = maps.shape[1]
    if image_size % h:
        raise EvalError(f"image size {image_size} is not a multiple of the map size {h}")
    rep = image_size // h
    seen: dict[str, int] = {}
    paths = []
    for k, tok in enumerate(tokens):
        up = np.kron(maps[k], np.ones((rep, rep)))
        seen[tok] = seen.get(tok, 0) + 1
        name = f"{sample_id}_{tok}.png" if seen[tok] == 1 else f"{sample_id}_{tok}-{k}.png"
        path = out / name
        save_png(up[None], path)
        paths.append(path)
    return paths


def eval_run(
    model: HandDiffusion,
    samples: list[Sample],
    n: int,
    seed: int,
    steps: int | None = None,
    tas: bool | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Generate from the first ``n`` samples' conditions and score silhouette IoU."""
    if n > len(samples):
        raise EvalError(f"n={n} exceeds dataset size {len(samples)}")
    if n < 1:
        raise EvalError("n must be >= 1")
    steps = model.schedule.T if steps is None else steps
    per_sample = []
    for i, s in enumerate(samples[:n]):
        img = generate(model, s.mesh_global, s.bbox, s.prompt, steps=steps, seed=seed + i, tas=tas)
        iou = silhouette_iou(img, s.mesh_global)
        per_sample.append({"id": s.id, "iou": iou})
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_png(img, Path(out_dir) / f"{s.id}.png")
    values = [r["iou"] for r in per_sample]
    return {
        "report_version": REPORT_VERSION,
        "config_hash": model.cfg.model_hash(),
        "seed": seed,
        "n": n,
        "steps": steps,
        "tas_at_inference": bool(model.cfg.tas.apply_at_inference if tas is None else tas),
        "mean_iou": float(np.mean(values)),
        "median_iou": float(statistics.median(values)),
        "per_sample": per_sample,
    }


def write_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
