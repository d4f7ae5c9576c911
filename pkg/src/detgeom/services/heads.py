"""Multi-scale detection-head grids, anchor-free decoding and greedy NMS."""
from __future__ import annotations
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import InvalidBoxError, UnknownHeadError
from ..geometry import BBox, iou


class HeadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    grid_h: int = Field(ge=1)
    grid_w: int = Field(ge=1)
    stride: int = Field(ge=1)

    @property
    def cells(self) -> int:
        return self.grid_h * self.grid_w


def _heads(input_size: int, strides: Sequence[Tuple[str, int]]) -> List[HeadSpec]:
    return [HeadSpec(name=n, grid_h=input_size // s, grid_w=input_size // s, stride=s) for n, s in strides]


_FIVE = (("P1", 2), ("P2", 4), ("P3", 8), ("P4", 16), ("P5", 32))
PRESETS: Dict[str, Tuple[Tuple[str, int], ...]] = {
    "baseline": _FIVE[2:],
    "p2": _FIVE[1:],
    "p1p2": _FIVE,
}


class HeadLayout(BaseModel):
    """Square input with one grid per head; defaults to the five-head P1-P5 layout."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_size: int = Field(default=640, ge=1)
    heads: List[HeadSpec] = Field(default_factory=lambda: _heads(640, _FIVE))

    @model_validator(mode="after")
    def _check_geometry(self) -> "HeadLayout":
        for h in self.heads:
            if h.grid_h * h.stride != self.input_size or h.grid_w * h.stride != self.input_size:
                raise ValueError(
                    f"head {h.name}: grid {h.grid_h}x{h.grid_w} * stride {h.stride} != input size {self.input_size}"
                )
        strides = [h.stride for h in self.heads]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"head strides must be strictly increasing, got {strides}")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate head names in {names}")
        return self

    @classmethod
    def preset(cls, name: str, input_size: int = 640) -> "HeadLayout":
        if name not in PRESETS:
            raise ValueError(f"unknown layout preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(input_size=input_size, heads=_heads(input_size, PRESETS[name]))

    def head(self, name: str) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise UnknownHeadError(f"unknown head {name!r}; layout has {[h.name for h in self.heads]}")

    @property
    def total_cells(self) -> int:
        return sum(h.cells for h in self.heads)


def grid_centers(layout: HeadLayout, head_name: str) -> np.ndarray:
    """Row-major cell centers ((col + 0.5) * stride, (row + 0.5) * stride), shape (cells, 2)."""
    h = layout.head(head_name)
    rows, cols = np.meshgrid(np.arange(h.grid_h), np.arange(h.grid_w), indexing="ij")
    return np.stack(((cols.ravel() + 0.5) * h.stride, (rows.ravel() + 0.5) * h.stride), axis=1)


@dataclass(frozen=True, slots=True)
class RawPrediction:
    head_name: str
    cell: Tuple[int, int]          # (row, col)
    offsets: Tuple[float, float]   # (dx, dy) in cell units
    size: Tuple[float, float]      # (dw, dh) in stride units
    class_scores: Tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.class_scores:
            raise InvalidBoxError("prediction has no class scores")
        if any(not 0.0 <= s <= 1.0 for s in self.class_scores):
            raise InvalidBoxError(f"class scores must lie in [0, 1], got {self.class_scores}")
        if min(self.size) <= 0:
            raise InvalidBoxError(f"size factors must be > 0, got {self.size}")


class Decoded(NamedTuple):
    box: BBox
    class_id: int
    confidence: float


def _clip_span(lo: float, hi: float, limit: float) -> Tuple[float, float]:
    lo, hi = min(max(lo, 0.0), limit), min(max(hi, 0.0), limit)
    if hi - lo < 1.0:
        # keep at least one pixel inside the frame
        if lo + 1.0 <= limit:
            hi = lo + 1.0
        else:
            lo, hi = limit - 1.0, limit
    return lo, hi


def decode(pred: RawPrediction, layout: HeadLayout) -> Decoded:
    h = layout.head(pred.head_name)
    row, col = pred.cell
    if not (0 <= row < h.grid_h and 0 <= col < h.grid_w):
        raise InvalidBoxError(f"cell {pred.cell} outside the {h.grid_h}x{h.grid_w} grid of {h.name}")
    cx = (col + 0.5 + pred.offsets[0]) * h.stride
    cy = (row + 0.5 + pred.offsets[1]) * h.stride
    w, hh = pred.size[0] * h.stride, pred.size[1] * h.stride
    size = float(layout.input_size)
    x1, x2 = _clip_span(cx - w / 2, cx + w / 2, size)
    y1, y2 = _clip_span(cy - hh / 2, cy + hh / 2, size)
    class_id = int(np.argmax(pred.class_scores))
    return Decoded(BBox.from_corners(x1, y1, x2, y2), class_id, float(pred.class_scores[class_id]))


def nms(dets: Sequence[Decoded | Tuple[BBox, int, float]], iou_threshold: float = 0.45,
        class_agnostic: bool = False) -> List[Decoded]:
    """Greedy suppression in descending confidence; equal confidences keep input order."""
    items = [Decoded(*d) for d in dets]
    order = sorted(range(len(items)), key=lambda i: -items[i].confidence)
    kept: List[Decoded] = []
    for i in order:
        cand = items[i]
        if all(
            iou(k.box, cand.box) < iou_threshold
            for k in kept
            if class_agnostic or k.class_id == cand.class_id
        ):
            kept.append(cand)
    return kept
