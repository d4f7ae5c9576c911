"""Detection evaluation: greedy matching, precision/recall, AP/mAP, confusion matrix, curves."""
from __future__ import annotations
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import logfire
import numpy as np
from pydantic import BaseModel

from ..errors import CountIdentityError, InvalidBoxError, NoTruthsError
from ..geometry import BBox, iou

COCO_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
VISDRONE_CLASSES: Tuple[str, ...] = (
    "pedestrian", "people", "bicycle", "car", "van",
    "truck", "tricycle", "awning-tricycle", "bus", "motor",
)


class Interp(str, Enum):
    all_points = "all_points"
    n_point = "n_point"


@dataclass(frozen=True, slots=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: BBox


@dataclass(frozen=True, slots=True)
class Detection:
    image_id: str
    class_id: int
    box: BBox
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidBoxError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(slots=True)
class GroundTruthSet:
    entries: List[GroundTruth] = field(default_factory=list)
    class_names: Optional[Dict[int, str]] = None

    def __post_init__(self) -> None:
        if self.class_names is not None:
            for e in self.entries:
                if e.class_id not in self.class_names:
                    raise InvalidBoxError(f"class id {e.class_id} outside the class table ({len(self.class_names)} names)")

    def __len__(self) -> int:
        return len(self.entries)

    def class_ids(self) -> List[int]:
        return sorted({e.class_id for e in self.entries})

    def count(self, class_id: int) -> int:
        return sum(1 for e in self.entries if e.class_id == class_id)

    def name(self, class_id: int) -> str:
        if self.class_names and class_id in self.class_names:
            return self.class_names[class_id]
        return str(class_id)


@dataclass(slots=True)
class DetectionSet:
    entries: List[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def class_ids(self) -> List[int]:
        return sorted({e.class_id for e in self.entries})

    def filtered(self, min_confidence: float) -> "DetectionSet":
        return DetectionSet([d for d in self.entries if d.confidence >= min_confidence])

    def for_class(self, class_id: int) -> "DetectionSet":
        return DetectionSet([d for d in self.entries if d.class_id == class_id])


def confidence_order(dets: Sequence[Detection]) -> List[int]:
    """Indices by descending confidence; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


# ---------- matching ----------
@dataclass(slots=True)
class MatchResult:
    order: List[int]
    det_tp: List[bool]            # input order
    det_iou: List[float]          # best IoU at match time, input order
    truth_matched: List[bool]     # input order of the truths considered
    n_truths: int
    n_dets: int

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return self.n_dets - self.tp

    @property
    def fn(self) -> int:
        return self.n_truths - sum(self.truth_matched)

    def sorted_tp(self) -> np.ndarray:
        return np.array([self.det_tp[i] for i in self.order], dtype=bool)


def _check_counts(m: MatchResult, where: str) -> None:
    if m.tp + m.fn != m.n_truths or m.tp + m.fp != m.n_dets:
        raise CountIdentityError(
            f"{where}: TP={m.tp} FP={m.fp} FN={m.fn} do not reconcile with "
            f"{m.n_truths} truths and {m.n_dets} detections"
        )


def _greedy_match(truths: Sequence[GroundTruth], dets: Sequence[Detection],
                  iou_threshold: float, class_aware: bool) -> Tuple[List[int], List[int], List[float]]:
    """Assign each detection (in confidence order) its best unmatched truth.

    Returns (order, truth index per detection or -1, IoU per detection).
    """
    by_key: Dict[tuple, List[int]] = defaultdict(list)
    for t_idx, t in enumerate(truths):
        by_key[(t.image_id, t.class_id) if class_aware else (t.image_id,)].append(t_idx)
    taken = [False] * len(truths)
    assigned = [-1] * len(dets)
    ious = [0.0] * len(dets)
    order = confidence_order(dets)
    for d_idx in order:
        d = dets[d_idx]
        key = (d.image_id, d.class_id) if class_aware else (d.image_id,)
        best, best_iou = -1, -1.0
        for t_idx in by_key.get(key, ()):
            if taken[t_idx]:
                continue
            value = iou(truths[t_idx].box, d.box)
            if value > best_iou:
                best, best_iou = t_idx, value
        if best >= 0:
            ious[d_idx] = best_iou
            if best_iou >= iou_threshold:
                taken[best] = True
                assigned[d_idx] = best
    return order, assigned, ious


def match_detections(gt: GroundTruthSet, det: DetectionSet, iou_threshold: float = 0.5,
                     class_id: Optional[int] = None) -> MatchResult:
    """COCO-style greedy matching within (image, class); optionally one class only."""
    truths = [t for t in gt.entries if class_id is None or t.class_id == class_id]
    dets = [d for d in det.entries if class_id is None or d.class_id == class_id]
    order, assigned, ious = _greedy_match(truths, dets, iou_threshold, class_aware=True)
    matched = [False] * len(truths)
    for t_idx in assigned:
        if t_idx >= 0:
            matched[t_idx] = True
    result = MatchResult(
        order=order,
        det_tp=[a >= 0 for a in assigned],
        det_iou=ious,
        truth_matched=matched,
        n_truths=len(truths),
        n_dets=len(dets),
    )
    _check_counts(result, "match" if class_id is None else f"match class {class_id}")
    return result


def pr_from_counts(tp: int, fp: int, n_truths: int) -> Tuple[float, float]:
    if tp + fp == 0:
        precision = 1.0 if n_truths == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if n_truths == 0 else tp / n_truths
    return precision, recall


def precision_recall(flags: MatchResult) -> Tuple[float, float]:
    return pr_from_counts(flags.tp, flags.fp, flags.n_truths)


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


# ---------- average precision ----------
@dataclass(slots=True)
class PRCurve:
    class_id: int
    points: List[Tuple[float, float, float]]  # (confidence, cum_precision, cum_recall)
    ap: float
    interp: Interp
    n_truths: int
    n_dets: int

    @property
    def recall(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])

    @property
    def precision(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def envelope(self) -> np.ndarray:
        """Precision made non-increasing in recall (running max from the right)."""
        prec = self.precision
        if prec.size == 0:
            return prec
        return np.flip(np.maximum.accumulate(np.flip(prec)))

    def best_f1_point(self) -> Tuple[float, float, float]:
        """(confidence, precision, recall) at the highest F1 along the curve."""
        if not self.points:
            return 0.0, 0.0, 0.0
        scores = [f1_score(p, r) for _, p, r in self.points]
        return self.points[int(np.argmax(scores))]


def integrate_pr(recall: np.ndarray, envelope: np.ndarray, interp: Interp) -> float:
    if recall.size == 0:
        return 0.0
    if interp is Interp.n_point:
        levels = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, levels, side="left")
        padded = np.append(envelope, 0.0)
        return float(np.mean(padded[idx]))
    prev = np.concatenate(([0.0], recall[:-1]))
    steps = recall - prev
    return math.fsum(float(s * p) for s, p in zip(steps, envelope) if s > 0)


def average_precision(gt: GroundTruthSet, det: DetectionSet, class_id: int,
                      iou_threshold: float = 0.5, interp: Interp | str = Interp.all_points) -> PRCurve:
    interp = Interp(interp)
    n_truths = gt.count(class_id)
    if n_truths == 0:
        raise NoTruthsError(f"class {class_id} has no ground truths; AP is undefined")
    m = match_detections(gt, det, iou_threshold, class_id=class_id)
    dets = [d for d in det.entries if d.class_id == class_id]
    tp = m.sorted_tp().astype(np.int64)
    tpc = np.cumsum(tp)
    fpc = np.cumsum(1 - tp)
    precision = tpc / np.maximum(tpc + fpc, 1)
    recall = tpc / n_truths
    conf = [dets[i].confidence for i in m.order]
    curve = PRCurve(
        class_id=class_id,
        points=[(c, float(p), float(r)) for c, p, r in zip(conf, precision, recall)],
        ap=0.0,
        interp=interp,
        n_truths=n_truths,
        n_dets=len(dets),
    )
    curve.ap = integrate_pr(recall, curve.envelope(), interp)
    return curve


# ---------- mAP ----------
class ClassAPRow(BaseModel):
    class_id: int
    name: str
    truths: int
    detections: int
    precision: float
    recall: float
    ap: Dict[str, float]
    ap_mean: float


class MeanAPReport(BaseModel):
    thresholds: List[float]
    interp: Interp
    map_by_threshold: Dict[str, float]
    map: float
    rows: List[ClassAPRow]
    notes: List[str] = []

    def at(self, threshold: float) -> Optional[float]:
        return self.map_by_threshold.get(threshold_key(threshold))


def threshold_key(t: float) -> str:
    return f"{t:.2f}"


def mean_ap(gt: GroundTruthSet, det: DetectionSet, thresholds: Sequence[float] = COCO_THRESHOLDS,
            interp: Interp | str = Interp.all_points) -> MeanAPReport:
    interp = Interp(interp)
    if not thresholds:
        raise ValueError("mean_ap needs at least one IoU threshold")
    classes = sorted(set(gt.class_ids()) | set(det.class_ids()))
    evaluated = [c for c in classes if gt.count(c) > 0]
    if not evaluated:
        raise NoTruthsError("no class has ground truths; mAP is undefined")
    notes = []
    for c in classes:
        if c not in evaluated:
            note = f"class {gt.name(c)} has detections but no truths; excluded from mAP"
            notes.append(note)
            logfire.warn(note, class_id=c)

    per_class: Dict[int, Dict[str, float]] = {c: {} for c in evaluated}
    first: Dict[int, PRCurve] = {}
    for t in thresholds:
        for c in evaluated:
            curve = average_precision(gt, det, c, t, interp)
            per_class[c][threshold_key(t)] = curve.ap
            first.setdefault(c, curve)

    map_by_threshold = {
        threshold_key(t): float(np.mean([per_class[c][threshold_key(t)] for c in evaluated])) for t in thresholds
    }
    rows = []
    for c in evaluated:
        _, p, r = first[c].best_f1_point()
        aps = per_class[c]
        rows.append(ClassAPRow(
            class_id=c,
            name=gt.name(c),
            truths=first[c].n_truths,
            detections=first[c].n_dets,
            precision=p,
            recall=r,
            ap=aps,
            ap_mean=float(np.mean(list(aps.values()))),
        ))
    return MeanAPReport(
        thresholds=list(thresholds),
        interp=interp,
        map_by_threshold=map_by_threshold,
        map=float(np.mean(list(map_by_threshold.values()))),
        rows=rows,
        notes=notes,
    )


# ---------- confusion matrix ----------
@dataclass(slots=True)
class ConfusionMatrix:
    """Counts indexed [predicted, true]; index ``num_classes`` is background."""
    counts: np.ndarray
    names: List[str]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    def normalized(self) -> np.ndarray:
        """Each true-class column divided by its total (zero columns stay zero)."""
        totals = self.counts.sum(axis=0, keepdims=True).astype(float)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    def tp_fp_fn(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        diag = np.diag(self.counts)[:-1]
        fp = self.counts.sum(axis=1)[:-1] - diag
        fn = self.counts.sum(axis=0)[:-1] - diag
        return diag, fp, fn


def confusion(gt: GroundTruthSet, det: DetectionSet, iou_threshold: float = 0.45,
              conf_threshold: float = 0.25, num_classes: Optional[int] = None) -> ConfusionMatrix:
    """Class-agnostic greedy matching so cross-class mistakes land off the diagonal."""
    if num_classes is None:
        ids = gt.class_ids() + det.class_ids()
        num_classes = max(len(gt.class_names or {}), (max(ids) + 1) if ids else 0)
    bg = num_classes
    counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    kept = det.filtered(conf_threshold).entries
    _, assigned, _ = _greedy_match(gt.entries, kept, iou_threshold, class_aware=False)
    matched = [False] * len(gt.entries)
    for d, t_idx in zip(kept, assigned):
        if t_idx >= 0:
            matched[t_idx] = True
            counts[d.class_id, gt.entries[t_idx].class_id] += 1
        else:
            counts[d.class_id, bg] += 1
    for t, hit in zip(gt.entries, matched):
        if not hit:
            counts[bg, t.class_id] += 1
    names = [gt.name(c) for c in range(num_classes)] + ["background"]
    return ConfusionMatrix(counts=counts, names=names)


# ---------- confidence curves ----------
@dataclass(slots=True)
class CurveSeries:
    name: str
    confidence: List[float]
    precision: List[float]
    recall: List[float]
    f1: List[float]


@dataclass(slots=True)
class CurveBundle:
    per_class: Dict[int, CurveSeries]
    aggregate: CurveSeries


def confidence_sweep(confidences: Iterable[float]) -> List[float]:
    """Descending unique confidences bracketed by the 1 and 0 endpoints."""
    return sorted(set(confidences) | {0.0, 1.0}, reverse=True)


def _series(name: str, conf_sorted: np.ndarray, tp_sorted: np.ndarray, n_truths: int) -> CurveSeries:
    tpc = np.concatenate(([0], np.cumsum(tp_sorted.astype(np.int64))))
    sweep = confidence_sweep(conf_sorted.tolist())
    # number of detections with confidence >= c, conf_sorted being descending
    counts = [int(np.sum(conf_sorted >= c)) for c in sweep]
    series = CurveSeries(name, [], [], [], [])
    for c, k in zip(sweep, counts):
        tp = int(tpc[k])
        p, r = pr_from_counts(tp, k - tp, n_truths)
        series.confidence.append(c)
        series.precision.append(p)
        series.recall.append(r)
        series.f1.append(f1_score(p, r))
    return series


def curve_bundle(gt: GroundTruthSet, det: DetectionSet, iou_threshold: float = 0.5) -> CurveBundle:
    classes = sorted(set(gt.class_ids()) | set(det.class_ids()))
    per_class: Dict[int, CurveSeries] = {}
    all_conf: List[float] = []
    all_tp: List[bool] = []
    for c in classes:
        m = match_detections(gt, det, iou_threshold, class_id=c)
        dets = [d for d in det.entries if d.class_id == c]
        conf = np.array([dets[i].confidence for i in m.order], dtype=float)
        tp = m.sorted_tp()
        per_class[c] = _series(gt.name(c), conf, tp, m.n_truths)
        all_conf.extend(conf.tolist())
        all_tp.extend(tp.tolist())
    order = sorted(range(len(all_conf)), key=lambda i: -all_conf[i])
    aggregate = _series(
        "all",
        np.array([all_conf[i] for i in order], dtype=float),
        np.array([all_tp[i] for i in order], dtype=bool),
        len(gt.entries),
    )
    return CurveBundle(per_class=per_class, aggregate=aggregate)
