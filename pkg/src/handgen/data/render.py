"""Articulated 2D hand skeleton and capsule-silhouette renderer.

Stands in for a parametric hand mesh: a pose yields 21 keypoints in the usual
topology (wrist, then thumb/index/middle/ring/pinky with four joints each) and a
set of capsules whose union is the hand silhouette.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HAND_TYPES = ("left", "right", "both")

# Hand-frame geometry, in units of wrist-to-middle-MCP length. y points toward
# the fingertips, x toward the thumb of a right hand.
FINGER_BASES = np.array(
    [[0.24, 0.18], [0.22, 0.90], [0.05, 0.96], [-0.12, 0.90], [-0.27, 0.78]]
)
FINGER_HEADINGS = np.array([0.95, 0.12, 0.0, -0.10, -0.22])
BONE_LENGTHS = np.array(
    [
        [0.34, 0.30, 0.24],
        [0.40, 0.25, 0.20],
        [0.45, 0.28, 0.21],
        [0.42, 0.26, 0.20],
        [0.33, 0.21, 0.18],
    ]
)
FINGER_RADIUS = np.array([0.095, 0.085, 0.085, 0.085, 0.078])
PALM_RADIUS = 0.17

# anatomical ranges per segment: (low, high) radians, relative to the parent bone
ANGLE_LOW = np.array([[-0.6, -0.3, -0.3]] + [[-0.3, -0.25, -0.25]] * 4)
ANGLE_HIGH = np.array([[0.4, 0.7, 0.7]] + [[0.3, 0.6, 0.6]] * 4)

# skeleton edges (parent, child) over the 21 keypoints
SKELETON = [(0, 1), (1, 2), (2, 3), (3, 4)] + [
    (p, c) for f in range(1, 5) for p, c in [(0, 4 * f + 1), (4 * f + 1, 4 * f + 2), (4 * f + 2, 4 * f + 3), (4 * f + 3, 4 * f + 4)]
]

PART_PALM = 0


class PoseError(ValueError):
    pass


@dataclass
class SyntheticHandPose:
    joint_angles: np.ndarray = field(default_factory=lambda: np.zeros((5, 3)))
    root_position: tuple[float, float] = (32.0, 56.0)
    scale: float = 24.0
    hand_type: str = "right"
    canvas_size: int = 64
    rotation: float = 0.0

    def validate(self) -> None:
        angles = np.asarray(self.joint_angles, dtype=np.float64)
        if angles.shape != (5, 3):
            raise PoseError(f"joint_angles must have shape (5, 3), got {angles.shape}")
        if not np.all(np.isfinite(angles)):
            raise PoseError("joint_angles must be finite")
        bad = (angles < ANGLE_LOW - 1e-9) | (angles > ANGLE_HIGH + 1e-9)
        if bad.any():
            f, s = map(int, np.argwhere(bad)[0])
            raise PoseError(
                f"joint angle finger={f} segment={s} = {angles[f, s]:.3f} outside "
                f"[{ANGLE_LOW[f, s]}, {ANGLE_HIGH[f, s]}]"
            )
        if not self.scale > 0:
            raise PoseError(f"scale must be positive, got {self.scale}")
        if self.canvas_size < 8:
            raise PoseError(f"canvas_size too small: {self.canvas_size}")
        if self.hand_type not in HAND_TYPES:
            raise PoseError(f"hand_type must be one of {HAND_TYPES}, got {self.hand_type!r}")


def canonical_pose(canvas_size: int = 64) -> SyntheticHandPose:
    """Open right palm, fingers up, centred horizontally."""
    s = canvas_size / 64
    return SyntheticHandPose(
        joint_angles=np.zeros((5, 3)),
        root_position=(32.0 * s, 56.0 * s),
        scale=22.0 * s,
        hand_type="right",
        canvas_size=canvas_size,
    )


def _hand_frame_joints(angles: np.ndarray) -> np.ndarray:
    joints = np.zeros((21, 2))
    for f in range(5):
        pos = FINGER_BASES[f].copy()
        heading = FINGER_HEADINGS[f]
        joints[4 * f + 1] = pos
        for s in range(3):
            heading += angles[f, s]
            pos = pos + BONE_LENGTHS[f, s] * np.array([np.sin(heading), np.cos(heading)])
            joints[4 * f + 2 + s] = pos
    return joints


def _to_image(joints: np.ndarray, pose: SyntheticHandPose, mirror: bool, root) -> np.ndarray:
    pts = joints.copy()
    if mirror:
        pts[:, 0] = -pts[:, 0]
    c, s = np.cos(pose.rotation), np.sin(pose.rotation)
    rot = np.array([[c, -s], [s, c]])
    pts = pts @ rot.T * pose.scale
    # image y grows downward
    return np.stack([root[0] + pts[:, 0], root[1] - pts[:, 1]], axis=1)


def _hands(pose: SyntheticHandPose) -> list[np.ndarray]:
    local = _hand_frame_joints(np.asarray(pose.joint_angles, dtype=np.float64))
    if pose.hand_type == "both":
        gap = 0.55 * pose.scale
        right = _to_image(local, pose, False, (pose.root_position[0] + gap, pose.root_position[1]))
        left = _to_image(local, pose, True, (pose.root_position[0] - gap, pose.root_position[1]))
        return [right, left]
    return [_to_image(local, pose, pose.hand_type == "left", pose.root_position)]


def hand_keypoints(pose: SyntheticHandPose) -> np.ndarray:
    """21x2 keypoints (x, y) in pixels of the primary hand."""
    pose.validate()
    return _hands(pose)[0]


def all_joints(pose: SyntheticHandPose) -> np.ndarray:
    """Joints of every rendered hand, stacked (21 or 42 rows)."""
    pose.validate()
    return np.concatenate(_hands(pose), axis=0)


def hand_capsules(pose: SyntheticHandPose) -> list[tuple[np.ndarray, np.ndarray, float, int]]:
    """Capsules ``(p0, p1, radius_px, part)``; part 0 is the palm, 1..5 the fingers."""
    pose.validate()
    caps = []
    for kp in _hands(pose):
        for f in range(5):
            base = 4 * f + 1
            caps.append((kp[0], kp[base], PALM_RADIUS * pose.scale, PART_PALM))
            for s in range(3):
                caps.append((kp[base + s], kp[base + s + 1], FINGER_RADIUS[f] * pose.scale, f + 1))
        for a, b in [(5, 9), (9, 13), (13, 17)]:
            caps.append((kp[a], kp[b], PALM_RADIUS * pose.scale, PART_PALM))
    return caps


def _segment_distance(px: np.ndarray, py: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    denom = float(d @ d)
    if denom == 0.0:
        u = np.zeros_like(px)
    else:
        u = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (p0[0] + u * d[0]), py - (p0[1] + u * d[1]))


def _rasterize(pose: SyntheticHandPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel coverage, bulge height and part id of the topmost capsule."""
    n = pose.canvas_size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    coverage = np.zeros((n, n))
    height = np.full((n, n), -1.0)
    part = np.zeros((n, n), dtype=np.int64)
    for p0, p1, r, pid in hand_capsules(pose):
        dist = _segment_distance(xs, ys, p0, p1)
        coverage = np.maximum(coverage, np.clip(r - dist + 0.5, 0.0, 1.0))
        h = np.sqrt(np.clip(1.0 - (dist / r) ** 2, 0.0, 1.0))
        h = np.where(dist <= r + 0.5, h, -1.0)
        # fingers drawn over the palm
        h = h + np.where(h >= 0, 0.01 * pid, 0.0)
        top = h > height
        height = np.where(top, h, height)
        part = np.where(top, pid, part)
    height = np.clip(height, 0.0, 1.0)
    return coverage, height, part


def silhouette_coverage(pose: SyntheticHandPose) -> np.ndarray:
    """Anti-aliased coverage in [0, 1]; ``coverage >= 0.5`` is the silhouette."""
    return _rasterize(pose)[0]


MESH_BASE = np.array([0.62, 0.68, 0.82])
PART_TINTS = np.array(
    [
        [1.00, 1.00, 1.00],
        [1.10, 0.90, 0.85],
        [0.90, 1.08, 0.90],
        [0.88, 0.92, 1.12],
        [1.08, 1.05, 0.80],
        [1.05, 0.85, 1.08],
    ]
)


def render_condition(pose: SyntheticHandPose) -> np.ndarray:
    """Shaded mesh-style condition image, float32 3xSxS in [0, 1] on black."""
    coverage, height, part = _rasterize(pose)
    if not (coverage >= 0.5).any():
        raise PoseError("pose renders an empty silhouette")
    shade = 0.55 + 0.45 * height
    color = MESH_BASE[None, None, :] * PART_TINTS[part] * shade[..., None]
    img = np.clip(color, 0.0, 1.0) * coverage[..., None]
    return img.transpose(2, 0, 1).astype(np.float32)


def render_rgb(pose: SyntheticHandPose, skin: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Skin-shaded hand over a dark background, float32 3xSxS in [0, 1].

    ``skin`` is an RGB triple; ``background`` an SxSx3 array.
    """
    coverage, height, _ = _rasterize(pose)
    if not (coverage >= 0.5).any():
        raise PoseError("pose renders an empty silhouette")
    shade = 0.6 + 0.4 * height
    hand = np.clip(np.asarray(skin)[None, None, :] * shade[..., None], 0.0, 1.0)
    a = coverage[..., None]
    img = a * hand + (1.0 - a) * background
    return img.transpose(2, 0, 1).astype(np.float32)
