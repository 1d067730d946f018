"""Axis-aligned box arithmetic shared by every stage of the pipeline.

Coordinates are continuous image pixels, x to the right, y down.  A box is
(tlx, tly, brx, bry) with the top-left corner strictly up-left of the
bottom-right corner; degenerate boxes are rejected at construction rather
than clamped.  Everything in this module is a pure value type or a pure
function, safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class BBox:
    tlx: float
    tly: float
    brx: float
    bry: float

    def __post_init__(self) -> None:
        vals = (self.tlx, self.tly, self.brx, self.bry)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.tlx < self.brx and self.tly < self.bry):
            raise ValueError(f"degenerate box {vals}: need tlx < brx and tly < bry")

    @property
    def width(self) -> float:
        return self.brx - self.tlx

    @property
    def height(self) -> float:
        return self.bry - self.tly

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, p: Point) -> bool:
        """Closed-region membership test; the boundary counts as inside."""
        return self.tlx <= p.x <= self.brx and self.tly <= p.y <= self.bry

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tlx, self.tly, self.brx, self.bry)


@dataclass(frozen=True)
class Detection:
    """A scored, categorized box: the unit of matching and evaluation."""

    box: BBox
    category: int
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class MuPolicy:
    """Shrink-factor selection rule for the central region.

    Larger boxes get the larger factor (a proportionally smaller shrink);
    the area comparison is strictly greater-than.
    """

    large_mu: float = 1.0 / 2.1
    small_mu: float = 1.0 / 2.4
    area_threshold: float = 3500.0

    def __post_init__(self) -> None:
        for name, mu in (("large_mu", self.large_mu), ("small_mu", self.small_mu)):
            if not (0.0 < mu <= 1.0):
                raise ValueError(f"{name}={mu} outside (0, 1]")
        if self.area_threshold < 0:
            raise ValueError(f"negative area_threshold {self.area_threshold}")


def box_center(b: BBox) -> Point:
    return Point((b.tlx + b.brx) / 2.0, (b.tly + b.bry) / 2.0)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the boxes are disjoint."""
    iw = min(a.brx, b.brx) - max(a.tlx, b.tlx)
    ih = min(a.bry, b.bry) - max(a.tly, b.tly)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) arrays of boxes.

    Rows are (tlx, tly, brx, bry).  Vectorized batch companion of iou(),
    used by soft-NMS and the evaluator.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def central_region(b: BBox, mu: float) -> BBox:
    """Concentric sub-box with width mu*width and height mu*height.

    The shrink is symmetric, so the region's center equals the box center
    exactly; mu = 1 recovers the box itself.
    """
    if not (0.0 < mu <= 1.0):
        raise ValueError(f"mu={mu} outside (0, 1]")
    cx = (b.tlx + b.brx) / 2.0
    cy = (b.tly + b.bry) / 2.0
    hw = (b.brx - b.tlx) / 2.0 * mu
    hh = (b.bry - b.tly) / 2.0 * mu
    return BBox(cx - hw, cy - hh, cx + hw, cy + hh)


def select_mu(b: BBox, policy: MuPolicy) -> float:
    """Pure step function of box area: large_mu above the threshold, else small_mu."""
    return policy.large_mu if b.area > policy.area_threshold else policy.small_mu
