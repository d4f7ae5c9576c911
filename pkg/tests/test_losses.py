import math

import numpy as np
import pytest
from pydantic import ValidationError

from detgeom.errors import RatioOutOfRangeError, UnknownLossKindError
from detgeom.geometry import BBox, iou
from detgeom.services.losses import (
    LossFactory,
    LossKind,
    LossSpec,
    ShapeSign,
    angle_cost,
    baseline_loss,
    check_gradient,
    compute_loss,
    distance_cost,
    inner_boxes,
    inner_iou,
    loss_gradient,
    shape_cost,
    sib_iou_loss,
    siou_components,
    siou_loss,
)
from detgeom.services.simulator import SimConfig, generate_pairs

GT = BBox(0.5, 0.5, 0.4, 0.4)
PRED = BBox(0.6, 0.6, 0.4, 0.4)


# ---------- straight-from-the-formulas reference ----------
def _corners(b: BBox, r: float = 1.0):
    return b.cx - b.w * r / 2, b.cy - b.h * r / 2, b.cx + b.w * r / 2, b.cy + b.h * r / 2


def ref_iou(gt: BBox, pred: BBox, r: float = 1.0) -> float:
    gx1, gy1, gx2, gy2 = _corners(gt, r)
    px1, py1, px2, py2 = _corners(pred, r)
    inter = max(0.0, min(px2, gx2) - max(px1, gx1)) * max(0.0, min(py2, gy2) - max(py1, gy1))
    union = gt.w * gt.h * r * r + pred.w * pred.h * r * r - inter
    return inter / union


def ref_siou(gt: BBox, pred: BBox, theta: float = 4.0, eps: float = 1e-7, sign: float = -1.0) -> float:
    dx, dy = pred.cx - gt.cx, pred.cy - gt.cy
    lam = math.sin(2 * math.asin(min(abs(dx), abs(dy)) / math.sqrt(dx * dx + dy * dy + eps)))
    gamma = 2 - lam
    gx1, gy1, gx2, gy2 = _corners(gt)
    px1, py1, px2, py2 = _corners(pred)
    cw, ch = max(px2, gx2) - min(px1, gx1), max(py2, gy2) - min(py1, gy1)
    delta = 0.5 * ((1 - math.exp(-gamma * (dx / cw) ** 2)) + (1 - math.exp(-gamma * (dy / ch) ** 2)))
    ow = abs(pred.w - gt.w) / max(pred.w, gt.w)
    oh = abs(pred.h - gt.h) / max(pred.h, gt.h)
    omega = 0.5 * (abs(1 - math.exp(sign * ow)) ** theta + abs(1 - math.exp(sign * oh)) ** theta)
    return 1 - ref_iou(gt, pred) + (delta + omega) / 2


def _pairs(n: int, seed: int):
    return generate_pairs(SimConfig(n_pairs=n, seed=seed, require_overlap=False))


# ---------- worked examples ----------
def test_worked_pair_components():
    c = siou_components(GT, PRED)
    assert c.lam == pytest.approx(1.0, abs=1e-9)
    assert c.gamma == pytest.approx(1.0, abs=1e-9)
    assert c.delta == pytest.approx(1 - math.exp(-0.04), abs=1e-9)
    assert c.omega == 0.0
    assert distance_cost(GT, PRED, 1.0) == pytest.approx(0.0392106, abs=1e-7)


def test_worked_pair_losses():
    siou = siou_loss(GT, PRED).value
    assert siou == pytest.approx(1 - 9 / 23 + (1 - math.exp(-0.04)) / 2, abs=1e-9)
    assert siou == pytest.approx(0.6283010, abs=1e-7)
    assert inner_iou(GT, PRED, 1.15) == pytest.approx(0.1296 / 0.2936, rel=1e-12)
    sib = sib_iou_loss(GT, PRED, LossSpec(ratio=1.15)).value
    assert sib == pytest.approx(siou + 9 / 23 - 0.1296 / 0.2936, abs=1e-12)
    assert sib == pytest.approx(0.5781884, abs=1e-7)


def test_angle_cost_anchors():
    assert angle_cost(GT, GT.shifted(0.1, 0.1)) == pytest.approx(1.0, abs=1e-9)
    assert angle_cost(GT, GT.shifted(-0.2, 0.2)) == pytest.approx(1.0, abs=1e-9)
    assert angle_cost(GT, GT.shifted(0.1, 0.0)) == 0.0
    assert angle_cost(GT, GT.shifted(0.0, -0.3)) == 0.0
    assert angle_cost(GT, GT) == 0.0
    expected = math.sin(2 * math.asin(0.0001 / math.sqrt(0.09 + 1e-8 + 1e-7)))
    assert angle_cost(GT, GT.shifted(0.3, 0.0001)) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(6.67e-4, rel=1e-3)


def test_shape_cost_signs():
    narrow = BBox(0.5, 0.5, 0.2, 0.4)
    assert shape_cost(GT, GT) == 0.0
    assert shape_cost(GT, GT, shape_sign="as_printed") == 0.0
    assert shape_cost(GT, narrow) == pytest.approx(0.5 * (1 - math.exp(-0.5)) ** 4, rel=1e-12)
    assert shape_cost(GT, narrow, shape_sign=ShapeSign.as_printed) == pytest.approx(
        0.5 * (math.exp(0.5) - 1) ** 4, rel=1e-12
    )
    both = BBox(0.5, 0.5, 0.2, 0.2)
    assert shape_cost(GT, both) == pytest.approx((1 - math.exp(-0.5)) ** 4, rel=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_component_parameters_are_validated(bad):
    with pytest.raises(ValueError, match="epsilon must be > 0"):
        angle_cost(GT, PRED, epsilon=bad)
    with pytest.raises(ValueError, match="theta must be > 0"):
        shape_cost(GT, PRED, theta=bad)
    assert shape_cost(GT, PRED, theta=0.5) >= 0.0

def test_inner_boxes():
    g, p = inner_boxes(GT, PRED, 1.0)
    assert g == pytest.approx(GT.corners()) and p == pytest.approx(PRED.corners())
    g, _ = inner_boxes(GT, PRED, 1.15)
    assert g == pytest.approx((0.27, 0.27, 0.73, 0.73))
    g, _ = inner_boxes(GT, PRED, 0.5)
    assert g == pytest.approx((0.4, 0.4, 0.6, 0.6))
    assert inner_iou(GT, GT, 0.7) == 1.0


def test_baseline_worked_values():
    assert baseline_loss(GT, PRED, LossSpec(kind="GIoU")).value == pytest.approx(0.6886957, abs=1e-7)
    diou = baseline_loss(GT, PRED, LossSpec(kind="DIoU")).value
    assert diou == pytest.approx(1 - 9 / 23 + 0.02 / 0.5, rel=1e-12)
    # equal aspect ratios and sizes: the CIoU and EIoU extras vanish
    assert baseline_loss(GT, PRED, LossSpec(kind="CIoU")).value == pytest.approx(diou, rel=1e-12)
    assert baseline_loss(GT, PRED, LossSpec(kind="EIoU")).value == pytest.approx(diou, rel=1e-12)


def test_iou_loss_has_no_signal_when_disjoint():
    r = compute_loss(GT, BBox(2.0, 2.0, 0.2, 0.2), LossSpec(kind="IoU"))
    assert r.value == 1.0
    assert not np.any(r.grad)


def test_pure_x_offset_diou_gradient_is_symmetric():
    r = compute_loss(GT, GT.shifted(0.15, 0.0), LossSpec(kind="DIoU"))
    assert r.grad[1] == 0.0


@pytest.mark.parametrize("kind", list(LossKind))
def test_identical_boxes_vanish(kind):
    r = compute_loss(GT, GT, LossSpec(kind=kind))
    assert r.value == 0.0
    assert not np.any(r.grad)


def test_disjoint_far_boxes_siou_exceeds_one():
    assert siou_loss(GT, BBox(3.0, 2.5, 0.1, 0.2)).value > 1.0


# ---------- ranges and parsing ----------
def test_ratio_range():
    with pytest.raises(ValidationError, match=r"ratio out of \[0.5, 1.5\]"):
        LossSpec(ratio=2.0)
    with pytest.raises(RatioOutOfRangeError, match=r"ratio out of \[0.5, 1.5\]"):
        inner_iou(GT, PRED, 0.4)
    LossSpec(ratio=0.5)
    LossSpec(ratio=1.5)


def test_kind_parsing():
    assert LossKind.parse("sib-iou") is LossKind.SIB_IoU
    assert LossKind.parse("SIB_IoU") is LossKind.SIB_IoU
    assert LossKind.parse("ciou") is LossKind.CIoU
    assert LossSpec(kind="inner-iou").kind is LossKind.InnerIoU
    with pytest.raises(UnknownLossKindError):
        LossKind.parse("WIoUv3")
    with pytest.raises(UnknownLossKindError):
        baseline_loss(GT, PRED, LossSpec(kind="SIoU"))


def test_factory_binds_spec():
    fn, label = LossFactory.build(LossSpec(kind="SIB_IoU", ratio=1.15))
    assert label == "SIB-IoU(ratio=1.15)"
    assert fn(GT, PRED).value == sib_iou_loss(GT, PRED, LossSpec(ratio=1.15)).value
    assert LossFactory.build(LossSpec(kind="CIoU"))[1] == "CIoU"


# ---------- seeded suites ----------
def test_matches_reference_formulas():
    rng = np.random.default_rng(3)
    for gt, pred in _pairs(1000, seed=11):
        ratio = float(rng.uniform(0.5, 1.5))
        spec = LossSpec(ratio=ratio)
        siou = siou_loss(gt, pred, spec).value
        assert siou == pytest.approx(ref_siou(gt, pred), rel=1e-12, abs=1e-15)
        assert inner_iou(gt, pred, ratio) == pytest.approx(ref_iou(gt, pred, ratio), rel=1e-12, abs=1e-15)
        expected = ref_siou(gt, pred) + ref_iou(gt, pred) - ref_iou(gt, pred, ratio)
        assert sib_iou_loss(gt, pred, spec).value == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_sib_reduces_to_siou_at_unit_ratio():
    for gt, pred in _pairs(1000, seed=12):
        a = sib_iou_loss(gt, pred, LossSpec(ratio=1.0)).value
        b = siou_loss(gt, pred).value
        assert abs(a - b) <= 1e-12


def test_inner_iou_monotone_in_ratio():
    rng = np.random.default_rng(5)
    ratios = np.linspace(0.5, 1.5, 21)
    for _ in range(500):
        gt = BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.3, 2))
        pred = gt.shifted(*(rng.uniform(-1, 1, 2) * (gt.w, gt.h)))
        values = [inner_iou(gt, pred, float(r)) for r in ratios]
        assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))


def test_angle_cost_bounds():
    for gt, pred in _pairs(500, seed=13):
        c = siou_components(gt, pred)
        assert 0.0 <= c.lam <= 1.0
        assert 1.0 <= c.gamma <= 2.0
        assert c.delta >= 0.0 and c.omega >= 0.0


@pytest.mark.parametrize("kind", list(LossKind))
def test_non_negative(kind):
    spec = LossSpec(kind=kind)
    for gt, pred in _pairs(200, seed=14):
        assert compute_loss(gt, pred, spec).value >= 0.0


@pytest.mark.parametrize("kind", list(LossKind))
def test_translation_and_scale_invariance(kind):
    spec = LossSpec(kind=kind, epsilon=1e-30)
    for gt, pred in _pairs(200, seed=15):
        base = compute_loss(gt, pred, spec).value
        moved = compute_loss(gt.shifted(0.25, -0.125), pred.shifted(0.25, -0.125), spec).value
        scaled = compute_loss(gt.scaled(2.5), pred.scaled(2.5), spec).value
        assert moved == pytest.approx(base, rel=1e-9, abs=1e-12)
        assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("kind", list(LossKind))
def test_gradients_match_finite_differences(kind):
    spec = LossSpec(kind=kind)
    checked = 0
    for gt, pred in _pairs(1000, seed=16):
        check = check_gradient(gt, pred, spec, h=1e-6)
        if not check.smooth:
            continue
        checked += 1
        assert check.rel_error < 1e-4, (gt, pred, check.analytic, check.numeric)
    assert checked > 900


def test_flagged_kinks():
    assert compute_loss(GT, GT.shifted(0.1, 0.1), LossSpec(kind="SIoU")).nonsmooth
    # edges at 0.75 are exact in binary
    square = BBox(0.5, 0.5, 0.5, 0.5)
    assert compute_loss(square, BBox(1.0, 0.5, 0.5, 0.5), LossSpec(kind="IoU")).nonsmooth
    assert not compute_loss(GT, BBox(0.57, 0.52, 0.3, 0.45), LossSpec(kind="SIoU")).nonsmooth


def test_as_printed_sign_is_available():
    spec = LossSpec(kind="SIoU", shape_sign="as_printed")
    narrow = BBox(0.55, 0.5, 0.2, 0.4)
    assert compute_loss(GT, narrow, spec).value > compute_loss(GT, narrow, LossSpec(kind="SIoU")).value
    assert iou(GT, narrow) > 0


def test_loss_gradient_is_the_result_gradient():
    spec = LossSpec(kind="SIoU")
    grad = loss_gradient(GT, PRED, spec)
    assert grad.shape == (4,)
    np.testing.assert_array_equal(grad, compute_loss(GT, PRED, spec).grad)
    # moving the prediction toward the truth lowers the loss
    assert grad[0] > 0 and grad[1] > 0
