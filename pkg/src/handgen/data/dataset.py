"""Synthetic hand dataset: generation, on-disk layout and loading.

Layout::

    <out>/samples.jsonl      one record per line: id, prompt, bbox, keypoints, hand_type, pose
    <out>/rgb/<id>.png       8-bit RGB photo-like image
    <out>/mesh/<id>.png      8-bit RGB condition (mesh) image
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .crop import BBox, CropTransform, crop_local
from .prompts import make_prompt
from .render import (
    ANGLE_HIGH,
    ANGLE_LOW,
    PALM_RADIUS,
    SyntheticHandPose,
    all_joints,
    hand_keypoints,
    render_condition,
    render_rgb,
)

SKIN_TONES = np.array(
    [
        [0.96, 0.80, 0.69],
        [0.91, 0.72, 0.58],
        [0.80, 0.60, 0.45],
        [0.68, 0.48, 0.34],
        [0.56, 0.40, 0.28],
    ]
)


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    id: str
    rgb_global: np.ndarray
    mesh_global: np.ndarray
    bbox: BBox
    prompt: str
    keypoints2d: np.ndarray
    hand_type: str
    rgb_local: np.ndarray
    mesh_local: np.ndarray
    crop: CropTransform


def random_pose(rng: np.random.Generator, size: int = 64, max_tries: int = 200) -> SyntheticHandPose:
    """Pose whose whole silhouette lies inside the canvas."""
    s = size / 64
    for _ in range(max_tries):
        hand_type = ["left", "right", "both"][rng.choice(3, p=[0.45, 0.45, 0.1])]
        lo, hi = (14.0, 17.0) if hand_type == "both" else (17.0, 22.0)
        angles = rng.uniform(0.8 * ANGLE_LOW, 0.8 * ANGLE_HIGH)
        pose = SyntheticHandPose(
            joint_angles=angles,
            root_position=(float(rng.uniform(18, 46) * s), float(rng.uniform(40, 58) * s)),
            scale=float(rng.uniform(lo, hi) * s),
            hand_type=hand_type,
            canvas_size=size,
            rotation=float(rng.uniform(-0.5, 0.5)),
        )
        pts = all_joints(pose)
        pad = PALM_RADIUS * pose.scale + 1.0
        if pts.min() >= pad and pts.max() <= size - pad:
            return pose
    raise DatasetError("could not place a hand inside the canvas")


def random_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.01, 0.07, size=3)
    ramp = np.linspace(0.0, 1.0, size)
    direction = rng.uniform(-0.04, 0.04, size=(2, 3))
    bg = base + ramp[:, None, None] * direction[0] + ramp[None, :, None] * direction[1]
    bg = bg + rng.normal(0.0, 0.01, size=(size, size, 3))
    return np.clip(bg, 0.0, 0.12)


def pose_bbox(pose: SyntheticHandPose) -> BBox:
    pad = PALM_RADIUS * pose.scale
    return BBox.from_points(all_joints(pose), pad, pose.canvas_size)


def synth_record(index: int, seed: int, size: int = 64):
    """Images and annotation for one sample; depends only on (index, seed, size)."""
    rng = np.random.default_rng([seed, index])
    pose = random_pose(rng, size)
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))] * rng.uniform(0.95, 1.05)
    rgb = render_rgb(pose, np.clip(skin, 0, 1), random_background(rng, size))
    mesh = render_condition(pose)
    record = {
        "id": f"{index:05d}",
        "prompt": make_prompt(pose, rng),
        "bbox": pose_bbox(pose).as_list(),
        "keypoints": np.round(hand_keypoints(pose), 4).tolist(),
        "hand_type": pose.hand_type,
        "pose": {
            "joint_angles": np.round(pose.joint_angles, 6).tolist(),
            "root_position": list(pose.root_position),
            "scale": pose.scale,
            "rotation": pose.rotation,
        },
    }
    return record, rgb, mesh


def to_uint8(img: np.ndarray) -> np.ndarray:
    """CxHxW float in [0, 1] to HxWxC uint8."""
    return (np.clip(img, 0.0, 1.0).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path: Path) -> None:
    arr = to_uint8(img)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    Image.fromarray(arr[..., 0] if mode == "L" else arr, mode=mode).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def generate_dataset(n: int, seed: int, out_dir: str | Path, image_size: int = 64) -> Path:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        (out / "rgb").mkdir(parents=True, exist_ok=True)
        (out / "mesh").mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(n):
            record, rgb, mesh = synth_record(i, seed, image_size)
            save_png(rgb, out / "rgb" / f"{record['id']}.png")
            save_png(mesh, out / "mesh" / f"{record['id']}.png")
            lines.append(json.dumps(record, sort_keys=True))
        (out / "samples.jsonl").write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out}: {e}") from e
    return out


def make_sample(record: dict, rgb: np.ndarray, mesh: np.ndarray, margin: float = 0.15) -> Sample:
    bbox = BBox(*record["bbox"])
    size = rgb.shape[1]
    rgb_local, tf = crop_local(rgb, bbox, size, margin)
    mesh_local, _ = crop_local(mesh, bbox, size, margin)
    return Sample(
        id=record["id"],
        rgb_global=rgb,
        mesh_global=mesh,
        bbox=bbox,
        prompt=record["prompt"],
        keypoints2d=np.asarray(record["keypoints"], dtype=np.float64),
        hand_type=record["hand_type"],
        rgb_local=rgb_local,
        mesh_local=mesh_local,
        crop=tf,
    )


def load_dataset(data_dir: str | Path, margin: float = 0.15) -> list[Sample]:
    root = Path(data_dir)
    index = root / "samples.jsonl"
    if not index.exists():
        raise DatasetError(f"no samples.jsonl in {root}")
    samples = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        rgb = load_png(root / "rgb" / f"{rec['id']}.png")
        mesh = load_png(root / "mesh" / f"{rec['id']}.png")
        samples.append(make_sample(rec, rgb, mesh, margin))
    if not samples:
        raise DatasetError(f"dataset {root} is empty")
    return samples
