"""Axis-aligned box geometry shared by the losses, the metrics and the heads."""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Iterator, Tuple

from .errors import InvalidBoxError


@dataclass(frozen=True, slots=True)
class BBox:
    """Center-form box (cx, cy, w, h) in continuous image-relative units."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidBoxError(f"box field {name} is not finite: {getattr(self, name)}")
        if self.w <= 0:
            raise InvalidBoxError(f"box width must be > 0, got w={self.w}")
        if self.h <= 0:
            raise InvalidBoxError(f"box height must be > 0, got h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    def corners(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def params(self) -> Tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def scaled(self, s: float) -> "BBox":
        """Scale all four parameters (a change of units, not a resize about the center)."""
        return BBox(self.cx * s, self.cy * s, self.w * s, self.h * s)

    def __iter__(self) -> Iterator[float]:
        return iter(self.params())


@dataclass(frozen=True, slots=True)
class EncloseBox:
    """Minimum axis-aligned box covering two boxes."""
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def wc(self) -> float:
        return self.x2 - self.x1

    @property
    def hc(self) -> float:
        return self.y2 - self.y1

    @property
    def diagonal_sq(self) -> float:
        return self.wc ** 2 + self.hc ** 2

    def contains(self, b: BBox) -> bool:
        return self.x1 <= b.x1 and self.y1 <= b.y1 and b.x2 <= self.x2 and b.y2 <= self.y2


def area(b: BBox) -> float:
    return b.w * b.h


def overlap_1d(lo_a: float, hi_a: float, lo_b: float, hi_b: float) -> float:
    """Length of the overlap of two intervals, clamped at 0."""
    return max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))


def intersection_area(a: BBox, b: BBox) -> float:
    # each factor is clamped before multiplying; two negative factors never yield area
    iw = overlap_1d(a.x1, a.x2, b.x1, b.x2)
    ih = overlap_1d(a.y1, a.y2, b.y1, b.y2)
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def enclose(a: BBox, b: BBox) -> EncloseBox:
    return EncloseBox(
        x1=min(a.x1, b.x1),
        y1=min(a.y1, b.y1),
        x2=max(a.x2, b.x2),
        y2=max(a.y2, b.y2),
    )
