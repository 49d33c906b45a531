"""Axis-aligned box arithmetic shared by detection, tracking and scene code."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates, corner form."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Build from COCO-form (x, y, width, height)."""
        return cls(x, y, x + w, y + h)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, xyxy) -> "BBox":
        if len(xyxy) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(xyxy)}")
        return cls(float(xyxy[0]), float(xyxy[1]), float(xyxy[2]), float(xyxy[3]))

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes and for zero-area unions."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def normalized_center_distance(pred: BBox, gt: BBox) -> float:
    """Center distance with each axis normalized by the ground-truth box extent.

    Raises ValueError for degenerate ground truth (zero width or height),
    which signals an invalid annotation rather than a model failure.
    """
    if gt.width <= 0 or gt.height <= 0:
        raise ValueError(f"degenerate ground-truth box: {gt}")
    (cx_p, cy_p), (cx_g, cy_g) = pred.center, gt.center
    dx = (cx_p - cx_g) / gt.width
    dy = (cy_p - cy_g) / gt.height
    return math.hypot(dx, dy)
