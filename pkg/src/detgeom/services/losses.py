"""Bounding-box regression losses with closed-form gradients.

Every loss takes the ground-truth box first and the predicted box second and
differentiates with respect to the predicted (cx, cy, w, h) only. Each
intermediate quantity is carried as a ``(value, grad)`` pair where ``grad`` is
a length-4 numpy vector, and the chain rule is applied by hand at every step.

Branch choices made by ``min``/``max``/``abs``/clamping are recorded on a
``_Path`` so callers can tell when two evaluations sit on the same smooth
piece, and exact ties are reported as non-smooth points.
"""
from __future__ import annotations
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..errors import RatioOutOfRangeError, UnknownLossKindError
from ..geometry import BBox

Vec = np.ndarray
Pair = Tuple[float, Vec]

RATIO_MIN, RATIO_MAX = 0.5, 1.5
DEFAULT_RATIO = 1.15
_ZERO = np.zeros(4)
_E_CX, _E_CY, _E_W, _E_H = np.eye(4)


class LossKind(str, Enum):
    IoU = "IoU"
    GIoU = "GIoU"
    DIoU = "DIoU"
    CIoU = "CIoU"
    EIoU = "EIoU"
    SIoU = "SIoU"
    InnerIoU = "InnerIoU"
    SIB_IoU = "SIB_IoU"

    @classmethod
    def parse(cls, raw: "str | LossKind") -> "LossKind":
        if isinstance(raw, LossKind):
            return raw
        key = str(raw).replace("-", "").replace("_", "").lower()
        for kind in cls:
            if kind.value.replace("_", "").lower() == key:
                return kind
        raise UnknownLossKindError(f"unknown loss kind {raw!r}; expected one of {[k.value for k in cls]}")


BASELINE_KINDS = (LossKind.IoU, LossKind.GIoU, LossKind.DIoU, LossKind.CIoU, LossKind.EIoU)


class ShapeSign(str, Enum):
    as_printed = "as_printed"
    corrected = "corrected"


class LossSpec(BaseModel):
    """Which loss to evaluate and its knobs."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LossKind = LossKind.SIB_IoU
    ratio: float = DEFAULT_RATIO
    theta: float = Field(default=4.0, gt=0)
    epsilon: float = Field(default=1e-7, gt=0)
    shape_sign: ShapeSign = ShapeSign.corrected

    @field_validator("kind", mode="before")
    @classmethod
    def _parse_kind(cls, v):
        return LossKind.parse(v)

    @field_validator("ratio")
    @classmethod
    def _check_ratio(cls, v: float) -> float:
        if not RATIO_MIN <= v <= RATIO_MAX:
            raise ValueError(f"ratio out of [{RATIO_MIN}, {RATIO_MAX}]: got {v}")
        return v

    @property
    def label(self) -> str:
        if self.kind in (LossKind.InnerIoU, LossKind.SIB_IoU):
            return f"{self.kind.value.replace('_', '-')}(ratio={self.ratio:g})"
        return self.kind.value


@dataclass(frozen=True, slots=True)
class SIoUComponents:
    lam: float
    gamma: float
    delta: float
    omega: float


@dataclass(slots=True)
class LossResult:
    value: float
    grad: Optional[Vec] = None
    nonsmooth: bool = False
    branches: Tuple[str, ...] = ()


@dataclass(slots=True)
class _Path:
    kinks: List[str] = field(default_factory=list)
    branches: List[str] = field(default_factory=list)


def check_ratio(ratio: float) -> None:
    if not RATIO_MIN <= ratio <= RATIO_MAX:
        raise RatioOutOfRangeError(ratio)


# ---------- differentiable building blocks ----------
def _div(a: Pair, b: Pair) -> Pair:
    (av, ag), (bv, bg) = a, b
    return av / bv, (ag * bv - av * bg) / (bv * bv)


def _pick(a: Pair, b: Pair, take_min: bool, path: _Path, label: str) -> Pair:
    """min/max of two differentiable values; ties keep ``a`` and are flagged."""
    if a[0] == b[0]:
        if not np.array_equal(a[1], b[1]):
            path.kinks.append(label)
        path.branches.append(label + ":=")
        return a
    first = a[0] < b[0] if take_min else a[0] > b[0]
    path.branches.append(label + (":a" if first else ":b"))
    return a if first else b


@dataclass(slots=True)
class _Edges:
    x1: Pair
    y1: Pair
    x2: Pair
    y2: Pair


def _edges(box: BBox, ratio: float, track: bool) -> _Edges:
    hw, hh = box.w * ratio / 2, box.h * ratio / 2
    if not track:
        return _Edges((box.cx - hw, _ZERO), (box.cy - hh, _ZERO), (box.cx + hw, _ZERO), (box.cy + hh, _ZERO))
    r2 = ratio / 2
    return _Edges(
        (box.cx - hw, _E_CX - r2 * _E_W),
        (box.cy - hh, _E_CY - r2 * _E_H),
        (box.cx + hw, _E_CX + r2 * _E_W),
        (box.cy + hh, _E_CY + r2 * _E_H),
    )


def _overlap(lo_a: Pair, hi_a: Pair, lo_b: Pair, hi_b: Pair, path: _Path, axis: str) -> Pair:
    hi = _pick(hi_a, hi_b, True, path, f"inter-{axis}2")
    lo = _pick(lo_a, lo_b, False, path, f"inter-{axis}1")
    d, gd = hi[0] - lo[0], hi[1] - lo[1]
    if d > 0:
        path.branches.append(f"overlap-{axis}:+")
        return d, gd
    if d == 0 and gd.any():
        path.kinks.append(f"touching-{axis}")
    path.branches.append(f"overlap-{axis}:0")
    return 0.0, _ZERO


def _iou_pair(gt: BBox, pred: BBox, ratio: float, path: _Path) -> Tuple[Pair, Pair]:
    """(IoU, union) of the boxes scaled by ``ratio`` about their centers.

    The union is ``wg*hg*ratio^2 + w*h*ratio^2 - inter``, which at ratio 1 is
    the plain union.
    """
    pe, ge = _edges(pred, ratio, True), _edges(gt, ratio, False)
    iw = _overlap(pe.x1, pe.x2, ge.x1, ge.x2, path, "x")
    ih = _overlap(pe.y1, pe.y2, ge.y1, ge.y2, path, "y")
    inter = (iw[0] * ih[0], iw[0] * ih[1] + ih[0] * iw[1])
    r2 = ratio * ratio
    a_gt = gt.w * gt.h * r2
    a_pred = (pred.w * pred.h * r2, r2 * (pred.h * _E_W + pred.w * _E_H))
    union = (a_gt + a_pred[0] - inter[0], a_pred[1] - inter[1])
    if inter[0] == 0.0:
        return (0.0, _ZERO), union
    return _div(inter, union), union


def _enclose(gt: BBox, pred: BBox, path: _Path) -> Tuple[Pair, Pair]:
    pe, ge = _edges(pred, 1.0, True), _edges(gt, 1.0, False)
    x1 = _pick(pe.x1, ge.x1, True, path, "encl-x1")
    x2 = _pick(pe.x2, ge.x2, False, path, "encl-x2")
    y1 = _pick(pe.y1, ge.y1, True, path, "encl-y1")
    y2 = _pick(pe.y2, ge.y2, False, path, "encl-y2")
    return (x2[0] - x1[0], x2[1] - x1[1]), (y2[0] - y1[0], y2[1] - y1[1])


def _abs(x: float, gx: Vec, path: _Path, label: str) -> Pair:
    if x == 0.0:
        path.kinks.append(label)
        path.branches.append(label + ":0")
        return 0.0, _ZERO
    path.branches.append(label + (":+" if x > 0 else ":-"))
    return abs(x), (gx if x > 0 else -gx)


# ---------- SIoU components ----------
def _angle_cost(gt: BBox, pred: BBox, epsilon: float, path: _Path) -> Pair:
    ux, uy = pred.cx - gt.cx, pred.cy - gt.cy
    s = ux * ux + uy * uy + epsilon
    gs = 2 * ux * _E_CX + 2 * uy * _E_CY
    # ties take the x branch
    if abs(ux) <= abs(uy):
        if abs(ux) == abs(uy) and ux != 0.0:
            path.kinks.append("angle-45")
        path.branches.append("angle:x")
        m = _abs(ux, _E_CX, path, "angle-abs")
    else:
        path.branches.append("angle:y")
        m = _abs(uy, _E_CY, path, "angle-abs")
    root = math.sqrt(s)
    t = m[0] / root
    gt_ = m[1] / root - m[0] * gs / (2 * s * root)
    a = math.asin(t)
    lam = math.sin(2 * a)
    dlam_dt = 2 * math.cos(2 * a) / math.sqrt(1 - t * t)
    return lam, dlam_dt * gt_


def _distance_cost(gt: BBox, pred: BBox, lam: Pair, path: _Path) -> Pair:
    cw, ch = _enclose(gt, pred, path)
    ux, uy = pred.cx - gt.cx, pred.cy - gt.cy
    gamma = (2 - lam[0], -lam[1])
    total, gtotal = 0.0, _ZERO
    for u, e, c in ((ux, _E_CX, cw), (uy, _E_CY, ch)):
        rho = (u / c[0]) ** 2
        grho = 2 * u / c[0] ** 2 * e - 2 * u * u / c[0] ** 3 * c[1]
        ex = math.exp(-gamma[0] * rho)
        total += 1 - ex
        gtotal = gtotal + ex * (gamma[1] * rho + gamma[0] * grho)
    return 0.5 * total, 0.5 * gtotal


def _shape_cost(gt: BBox, pred: BBox, theta: float, shape_sign: ShapeSign, path: _Path) -> Pair:
    sign = -1.0 if shape_sign is ShapeSign.corrected else 1.0
    total, gtotal = 0.0, _ZERO
    for p, g, e, axis in ((pred.w, gt.w, _E_W, "w"), (pred.h, gt.h, _E_H, "h")):
        omega = abs(p - g) / max(p, g)
        if p > g:
            gomega = g / (p * p) * e
        elif p < g:
            gomega = -1.0 / g * e
        else:
            gomega = _ZERO
            if theta <= 1:
                path.kinks.append(f"shape-{axis}")
        ex = math.exp(sign * omega)
        # |1 - e^{+w}| keeps the literal form real for non-integer theta
        base = abs(1 - ex)
        total += base ** theta
        if base > 0:
            gtotal = gtotal + theta * base ** (theta - 1) * ex * gomega
    return 0.5 * total, 0.5 * gtotal


# ---------- public component functions ----------
def angle_cost(gt: BBox, pred: BBox, epsilon: float = 1e-7) -> float:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    return _angle_cost(gt, pred, epsilon, _Path())[0]


def distance_cost(gt: BBox, pred: BBox, lam: float) -> float:
    return _distance_cost(gt, pred, (lam, _ZERO), _Path())[0]


def shape_cost(gt: BBox, pred: BBox, theta: float = 4.0,
               shape_sign: ShapeSign | str = ShapeSign.corrected) -> float:
    if not theta > 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    return _shape_cost(gt, pred, theta, ShapeSign(shape_sign), _Path())[0]


def siou_components(gt: BBox, pred: BBox, spec: LossSpec | None = None) -> SIoUComponents:
    spec = spec or LossSpec(kind=LossKind.SIoU)
    path = _Path()
    lam = _angle_cost(gt, pred, spec.epsilon, path)
    delta = _distance_cost(gt, pred, lam, path)
    omega = _shape_cost(gt, pred, spec.theta, spec.shape_sign, path)
    return SIoUComponents(lam=lam[0], gamma=2 - lam[0], delta=delta[0], omega=omega[0])


def inner_boxes(gt: BBox, pred: BBox, ratio: float) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Corner-form (x1, y1, x2, y2) auxiliary boxes, each scaled about its own center."""
    check_ratio(ratio)
    ge, pe = _edges(gt, ratio, False), _edges(pred, ratio, False)
    return (ge.x1[0], ge.y1[0], ge.x2[0], ge.y2[0]), (pe.x1[0], pe.y1[0], pe.x2[0], pe.y2[0])


def inner_iou(gt: BBox, pred: BBox, ratio: float) -> float:
    check_ratio(ratio)
    if gt == pred:
        return 1.0
    return _iou_pair(gt, pred, ratio, _Path())[0][0]


# ---------- full losses ----------
def _iou_term(gt: BBox, pred: BBox, ratio: float, path: _Path) -> Tuple[Pair, Pair]:
    if gt == pred:
        return (1.0, _ZERO), (gt.w * gt.h * ratio * ratio, _ZERO)
    return _iou_pair(gt, pred, ratio, path)


def _siou(gt: BBox, pred: BBox, spec: LossSpec, path: _Path) -> Pair:
    (iou_v, iou_g), _ = _iou_term(gt, pred, 1.0, path)
    lam = _angle_cost(gt, pred, spec.epsilon, path)
    delta = _distance_cost(gt, pred, lam, path)
    omega = _shape_cost(gt, pred, spec.theta, spec.shape_sign, path)
    value = 1 - iou_v + (delta[0] + omega[0]) / 2
    return value, -iou_g + (delta[1] + omega[1]) / 2


def _sib_iou(gt: BBox, pred: BBox, spec: LossSpec, path: _Path) -> Pair:
    check_ratio(spec.ratio)
    siou_v, siou_g = _siou(gt, pred, spec, path)
    (iou_v, iou_g), _ = _iou_term(gt, pred, 1.0, path)
    (inn_v, inn_g), _ = _iou_term(gt, pred, spec.ratio, path)
    # grouped so ratio 1 cancels exactly
    return siou_v + (iou_v - inn_v), siou_g + (iou_g - inn_g)


def _inner_iou_loss(gt: BBox, pred: BBox, spec: LossSpec, path: _Path) -> Pair:
    check_ratio(spec.ratio)
    (inn_v, inn_g), _ = _iou_term(gt, pred, spec.ratio, path)
    return 1 - inn_v, -inn_g


def _baseline(gt: BBox, pred: BBox, spec: LossSpec, path: _Path) -> Pair:
    kind = spec.kind
    (iou_v, iou_g), union = _iou_term(gt, pred, 1.0, path)
    value, grad = 1 - iou_v, -iou_g
    if kind is LossKind.IoU:
        return value, grad
    cw, ch = _enclose(gt, pred, path)
    if kind is LossKind.GIoU:
        c_area = (cw[0] * ch[0], cw[0] * ch[1] + ch[0] * cw[1])
        gap = _div((c_area[0] - union[0], c_area[1] - union[1]), c_area)
        return value + gap[0], grad + gap[1]

    ux, uy = pred.cx - gt.cx, pred.cy - gt.cy
    d2 = (ux * ux + uy * uy, 2 * ux * _E_CX + 2 * uy * _E_CY)
    c2 = (cw[0] ** 2 + ch[0] ** 2, 2 * cw[0] * cw[1] + 2 * ch[0] * ch[1])
    dist = _div(d2, c2)
    value, grad = value + dist[0], grad + dist[1]
    if kind is LossKind.DIoU:
        return value, grad

    if kind is LossKind.CIoU:
        k = 4 / math.pi ** 2
        diff = math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)
        n2 = pred.w ** 2 + pred.h ** 2
        # d atan(w/h) = (h dw - w dh) / (w^2 + h^2)
        gdiff = -(pred.h * _E_W - pred.w * _E_H) / n2
        v, gv = k * diff * diff, 2 * k * diff * gdiff
        # alpha * v = v^2 / (1 - IoU + v + eps), alpha differentiated too
        denom = (1 - iou_v + v + spec.epsilon, -iou_g + gv)
        av = _div((v * v, 2 * v * gv), denom)
        return value + av[0], grad + av[1]

    if kind is LossKind.EIoU:
        for p, g, e, c in ((pred.w, gt.w, _E_W, cw), (pred.h, gt.h, _E_H, ch)):
            pen = _div(((p - g) ** 2, 2 * (p - g) * e), (c[0] ** 2, 2 * c[0] * c[1]))
            value, grad = value + pen[0], grad + pen[1]
        return value, grad

    raise UnknownLossKindError(f"{kind} is not a baseline loss")


_DISPATCH: dict[LossKind, Callable[[BBox, BBox, LossSpec, _Path], Pair]] = {
    LossKind.IoU: _baseline,
    LossKind.GIoU: _baseline,
    LossKind.DIoU: _baseline,
    LossKind.CIoU: _baseline,
    LossKind.EIoU: _baseline,
    LossKind.SIoU: _siou,
    LossKind.InnerIoU: _inner_iou_loss,
    LossKind.SIB_IoU: _sib_iou,
}


def compute_loss(gt: BBox, pred: BBox, spec: LossSpec) -> LossResult:
    """Loss value, closed-form gradient and smoothness flags for any kind."""
    fn = _DISPATCH.get(spec.kind)
    if fn is None:
        raise UnknownLossKindError(f"unknown loss kind {spec.kind!r}")
    if spec.kind in (LossKind.InnerIoU, LossKind.SIB_IoU):
        check_ratio(spec.ratio)
    if gt == pred:
        # zero is a valid subgradient at the minimum every kind shares
        return LossResult(0.0, np.zeros(4), nonsmooth=True, branches=("identical",))
    path = _Path()
    value, grad = fn(gt, pred, spec, path)
    return LossResult(float(value), np.asarray(grad, dtype=float), bool(path.kinks), tuple(path.branches))


def siou_loss(gt: BBox, pred: BBox, spec: LossSpec | None = None) -> LossResult:
    spec = spec or LossSpec(kind=LossKind.SIoU)
    return compute_loss(gt, pred, spec.model_copy(update={"kind": LossKind.SIoU}))


def sib_iou_loss(gt: BBox, pred: BBox, spec: LossSpec | None = None) -> LossResult:
    spec = spec or LossSpec()
    return compute_loss(gt, pred, spec.model_copy(update={"kind": LossKind.SIB_IoU}))


def baseline_loss(gt: BBox, pred: BBox, spec: LossSpec) -> LossResult:
    if spec.kind not in BASELINE_KINDS:
        raise UnknownLossKindError(f"{spec.kind.value} is not one of {[k.value for k in BASELINE_KINDS]}")
    return compute_loss(gt, pred, spec)


def loss_gradient(gt: BBox, pred: BBox, spec: LossSpec) -> Vec:
    return compute_loss(gt, pred, spec).grad


class LossFactory:
    """Builds a loss callable bound to one spec, plus its display label."""

    @staticmethod
    def build(spec: LossSpec) -> Tuple[Callable[[BBox, BBox], LossResult], str]:
        if spec.kind not in _DISPATCH:
            raise UnknownLossKindError(f"unknown loss kind {spec.kind!r}")
        if spec.kind in (LossKind.InnerIoU, LossKind.SIB_IoU):
            check_ratio(spec.ratio)

        def fn(gt: BBox, pred: BBox) -> LossResult:
            return compute_loss(gt, pred, spec)

        return fn, spec.label


# ---------- finite-difference checking ----------
def finite_difference_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of a parameter vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad_n = np.zeros_like(x)
    e = np.zeros_like(x)
    for i in range(x.shape[0]):
        e[i] = 1.0
        grad_n[i] = 0.5 * (fun(x + h * e) - fun(x - h * e)) / h
        e[i] = 0.0
    return grad_n


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm error scaled by the larger gradient magnitude (floored)."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


@dataclass(frozen=True, slots=True)
class GradCheck:
    rel_error: float
    analytic: Vec
    numeric: Vec
    smooth: bool


def check_gradient(gt: BBox, pred: BBox, spec: LossSpec, h: float = 1e-6) -> GradCheck:
    """Compare the closed-form gradient against central differences.

    ``smooth`` is False when the point is a flagged tie or when any probe
    point lands on a different piece (a kink within ``h``).
    """
    centre = compute_loss(gt, pred, spec)
    x0 = np.array(pred.params())
    probes_same = True

    def fun(x: np.ndarray) -> float:
        nonlocal probes_same
        r = compute_loss(gt, BBox(*x), spec)
        if r.branches != centre.branches:
            probes_same = False
        return r.value

    numeric = finite_difference_gradient(fun, x0, h)
    return GradCheck(
        rel_error=relative_error(centre.grad, numeric),
        analytic=centre.grad,
        numeric=numeric,
        smooth=probes_same and not centre.nonsmooth,
    )
