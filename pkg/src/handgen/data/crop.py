"""Bounding boxes and bbox-driven global-to-local cropping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class BBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise BBoxError(f"bbox must have positive width and height, got w={self.w} h={self.h}")

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_points(cls, pts: np.ndarray, pad: float, size: int) -> "BBox":
        """Tight box around ``pts`` grown by ``pad`` pixels, clamped to the canvas."""
        lo = np.clip(pts.min(axis=0) - pad, 0, size)
        hi = np.clip(pts.max(axis=0) + pad, 0, size)
        x0, y0 = np.floor(lo)
        x1, y1 = np.ceil(hi)
        return cls(float(x0), float(y0), float(x1 - x0), float(y1 - y0))

    def contains(self, pts: np.ndarray) -> bool:
        pts = np.atleast_2d(pts)
        return bool(
            np.all(pts[:, 0] >= self.x)
            and np.all(pts[:, 0] <= self.x + self.w)
            and np.all(pts[:, 1] >= self.y)
            and np.all(pts[:, 1] <= self.y + self.h)
        )


@dataclass(frozen=True)
class CropTransform:
    """Affine map between global and local continuous pixel coordinates.

    Continuous coordinates put pixel ``i`` on the interval ``[i, i + 1)``.
    """

    origin_x: float
    origin_y: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.array([self.origin_x, self.origin_y])) * self.scale

    def to_global(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts / self.scale + np.array([self.origin_x, self.origin_y])


def square_crop_window(bbox: BBox, image_size: int, margin: float = 0.15, out_size: int | None = None) -> CropTransform:
    """Square window around ``bbox``: longer side plus ``margin`` per side, shifted to fit."""
    if margin < 0:
        raise BBoxError("margin must be nonnegative")
    side = max(bbox.w, bbox.h) * (1.0 + 2.0 * margin)
    side = min(side, float(image_size))
    cx, cy = bbox.x + bbox.w / 2, bbox.y + bbox.h / 2
    x0 = min(max(cx - side / 2, 0.0), image_size - side)
    y0 = min(max(cy - side / 2, 0.0), image_size - side)
    return CropTransform(x0, y0, side, out_size or image_size)


def crop_local(image: np.ndarray, bbox: BBox, out_size: int, margin: float = 0.15) -> tuple[np.ndarray, CropTransform]:
    """Crop a CxSxS image to the square window around ``bbox``, bilinearly resized.

    Returns the Cxout_sizexout_size crop together with its coordinate transform.
    """
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise BBoxError(f"expected a square CxSxS image, got shape {image.shape}")
    size = image.shape[1]
    tf = square_crop_window(bbox, size, margin, out_size)
    centers = np.arange(out_size, dtype=np.float64) + 0.5
    # sample positions in array-index space (pixel centres sit at integer indices)
    gx = centers / tf.scale + tf.origin_x - 0.5
    gy = centers / tf.scale + tf.origin_y - 0.5
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    out = np.stack(
        [ndimage.map_coordinates(ch.astype(np.float64), [yy, xx], order=1, mode="nearest") for ch in image]
    )
    return out.astype(image.dtype), tf
