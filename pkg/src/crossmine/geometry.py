"""Axis-aligned box arithmetic shared by every other module.

Boxes use integer pixel coordinates with an inclusive-exclusive
convention: a box spans [x_min, x_max) x [y_min, y_max), so
width = x_max - x_min and every area is an exact integer.  Overlap
ratios are computed in integer arithmetic with a single final division.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """Clipping removed all area from a box."""


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative coordinates in {self.as_tuple()}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"box {self.as_tuple()} has no area")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_json(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_json(cls, data) -> "BoundingBox":
        if len(data) != 4:
            raise ValueError(f"box must have 4 coordinates, got {data!r}")
        return cls(*data)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def iou_many(box: BoundingBox, coords: np.ndarray) -> np.ndarray:
    """IoU of one box against an (n, 4) array of [x0, y0, x1, y1] rows."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.size == 0:
        return np.zeros(0)
    iw = np.minimum(box.x_max, coords[:, 2]) - np.maximum(box.x_min, coords[:, 0])
    ih = np.minimum(box.y_max, coords[:, 3]) - np.maximum(box.y_min, coords[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    union = box.area + areas - inter
    return inter / union


def clip(box: BoundingBox, width: int, height: int) -> BoundingBox:
    """Clip a box to lie within [0, width) x [0, height)."""
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid clip bounds {width}x{height}")
    x0 = max(box.x_min, 0)
    y0 = max(box.y_min, 0)
    x1 = min(box.x_max, width)
    y1 = min(box.y_max, height)
    if x0 >= x1 or y0 >= y1:
        raise DegenerateBoxError(
            f"clipping {box.as_tuple()} to {width}x{height} leaves no area"
        )
    return BoundingBox(x0, y0, x1, y1)
