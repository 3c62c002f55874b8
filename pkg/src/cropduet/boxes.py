"""Axis-aligned boxes in pixel-center coordinates and their overlap measure.

Coordinates are continuous: a box spans [x0, x1] x [y0, y1] and its area is
(x1 - x0) * (y1 - y0).  Integer-coordinate boxes agree with counting unit
cells [i, i+1) x [j, j+1) contained in the region.
"""

import math
from dataclasses import dataclass

from .errors import ContractError


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError(f"non-finite box {vals}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ContractError(f"inverted box {vals}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    def clipped(self, w, h):
        """Clip into the pixel-center range of a w x h raster."""
        return BBox(
            min(max(self.x0, 0.0), w - 1.0),
            min(max(self.y0, 0.0), h - 1.0),
            min(max(self.x1, 0.0), w - 1.0),
            min(max(self.y1, 0.0), h - 1.0),
        )

    def round(self):
        return BBox(round(self.x0), round(self.y0), round(self.x1), round(self.y1))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes and zero-area unions."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union
