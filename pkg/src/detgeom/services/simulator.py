"""Synthetic box-regression benchmark: descend anchors onto ground truths under each loss."""
from __future__ import annotations
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Literal, Optional, Sequence, Tuple

import logfire
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..errors import DescentDivergedError, ScenarioUnsatisfiableError
from ..geometry import BBox, iou
from .losses import LossKind, LossSpec, compute_loss

PairList = List[Tuple[BBox, BBox]]

ABLATION_LOSSES = (
    LossSpec(kind=LossKind.GIoU),
    LossSpec(kind=LossKind.DIoU),
    LossSpec(kind=LossKind.CIoU),
    LossSpec(kind=LossKind.EIoU),
    LossSpec(kind=LossKind.SIoU),
    LossSpec(kind=LossKind.SIB_IoU, ratio=1.15),
)


class Scenario(str, Enum):
    uniform_random = "uniform_random"
    high_iou_start = "high_iou_start"
    low_iou_start = "low_iou_start"
    axis_aligned_offset = "axis_aligned_offset"


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_pairs: int = Field(default=200, ge=1)
    scenario: Scenario = Scenario.uniform_random
    steps: int = Field(default=300, ge=1)
    lr: float = Field(default=0.01, gt=0)
    lr_decay: float = Field(default=0.985, gt=0, le=1)
    seed: int = 0
    losses: List[LossSpec] = Field(
        default_factory=lambda: [LossSpec(kind=LossKind.CIoU), LossSpec(kind=LossKind.SIB_IoU)]
    )
    stop_loss: float = Field(default=0.05, gt=0)
    optimizer: Literal["gd", "adam"] = "gd"
    betas: Tuple[float, float] = (0.937, 0.999)
    weight_decay: float = Field(default=0.0, ge=0)
    wh_floor: float = Field(default=1e-4, gt=0)
    require_overlap: bool = True
    high_iou_min: float = Field(default=0.6, gt=0, le=1)
    low_iou_max: float = Field(default=0.2, gt=0, le=1)
    max_attempts: int = Field(default=10_000, ge=1)

    @field_validator("losses", mode="before")
    @classmethod
    def _expand_losses(cls, v):
        if v == "ablation":
            return list(ABLATION_LOSSES)
        if isinstance(v, (list, tuple)):
            return [{"kind": item} if isinstance(item, str) else item for item in v]
        return v

    @model_validator(mode="after")
    def _check_betas(self) -> "SimConfig":
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"adam betas must lie in [0, 1), got {self.betas}")
        return self


@dataclass(slots=True)
class ConvergenceTrace:
    label: str
    loss_mean: List[float] = field(default_factory=list)
    iou_mean: List[float] = field(default_factory=list)
    steps_to_threshold: Optional[int] = None

    @property
    def final_iou(self) -> float:
        return self.iou_mean[-1]

    @property
    def final_loss(self) -> float:
        return self.loss_mean[-1]

    @property
    def auc(self) -> float:
        """Area under the mean-loss curve with unit step width."""
        return math.fsum(self.loss_mean)


class SummaryRow(BaseModel):
    label: str
    kind: LossKind
    ratio: float
    final_loss: float
    final_iou: float
    steps_to_threshold: Optional[int]
    auc: float


@dataclass(slots=True)
class ComparisonReport:
    config: SimConfig
    traces: List[ConvergenceTrace]
    rows: List[SummaryRow]

    def trace(self, label: str) -> ConvergenceTrace:
        for t in self.traces:
            if t.label == label:
                return t
        raise KeyError(label)

    def dominates(self, a: str, b: str, from_step: int = 50) -> bool:
        """True when ``a``'s mean-IoU curve is >= ``b``'s from ``from_step`` on."""
        ta, tb = self.trace(a), self.trace(b)
        return all(x >= y for x, y in zip(ta.iou_mean[from_step:], tb.iou_mean[from_step:]))

    def row(self, label: str) -> SummaryRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def faster(self, a: str, b: str) -> bool:
        """True when ``a`` reaches ``stop_loss`` in fewer steps than ``b``.

        A run that never reaches it counts as slower than one that does; two
        such runs are ordered by final mean IoU.
        """
        ra, rb = self.row(a), self.row(b)
        sa, sb = ra.steps_to_threshold, rb.steps_to_threshold
        if sa is None and sb is None:
            return ra.final_iou > rb.final_iou
        return sb is None or (sa is not None and sa < sb)

    def verdicts(self, from_step: int = 50) -> dict:
        """Pass/fail readings of the two expected convergence orderings.

        ``sib_vs_ciou`` is present when both a CIoU and a SIB-IoU run are in
        the report; ``ratio`` when the SIB-IoU runs include a ratio below 1
        and one above 1. ``expected`` holds only for the two IoU-start
        scenarios and is ``None`` otherwise.
        """
        out: dict = {}
        ciou = next((r.label for r in self.rows if r.kind is LossKind.CIoU), None)
        sibs = [r for r in self.rows if r.kind is LossKind.SIB_IoU]
        if ciou is not None and sibs:
            sib = sibs[0].label
            out["sib_vs_ciou"] = {
                "sib": sib,
                "ciou": ciou,
                "fewer_steps": self.faster(sib, ciou),
                "dominates": self.dominates(sib, ciou, from_step),
            }
        low = min((r for r in sibs if r.ratio < 1), key=lambda r: r.ratio, default=None)
        high = max((r for r in sibs if r.ratio > 1), key=lambda r: r.ratio, default=None)
        if low is not None and high is not None:
            faster = low.label if self.faster(low.label, high.label) else high.label
            expected = {
                Scenario.high_iou_start: low.label,
                Scenario.low_iou_start: high.label,
            }.get(self.config.scenario)
            out["ratio"] = {
                "below_one": low.label,
                "above_one": high.label,
                "faster": faster,
                "expected": expected,
                "as_expected": None if expected is None else faster == expected,
            }
        return out


# ---------- pair generation ----------
def _random_gt(rng: np.random.Generator) -> BBox:
    return BBox(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3))


def _candidate(rng: np.random.Generator, gt: BBox, scenario: Scenario) -> BBox:
    if scenario is Scenario.uniform_random:
        return BBox(
            gt.cx + rng.uniform(-1, 1) * gt.w,
            gt.cy + rng.uniform(-1, 1) * gt.h,
            rng.uniform(0.05, 0.3),
            rng.uniform(0.05, 0.3),
        )
    if scenario is Scenario.high_iou_start:
        return BBox(
            gt.cx + rng.normal(0, 0.1) * gt.w,
            gt.cy + rng.normal(0, 0.1) * gt.h,
            gt.w * math.exp(rng.normal(0, 0.1)),
            gt.h * math.exp(rng.normal(0, 0.1)),
        )
    if scenario is Scenario.low_iou_start:
        return BBox(
            gt.cx + rng.uniform(-1, 1) * gt.w,
            gt.cy + rng.uniform(-1, 1) * gt.h,
            gt.w * math.exp(rng.uniform(-0.7, 0.7)),
            gt.h * math.exp(rng.uniform(-0.7, 0.7)),
        )
    # axis_aligned_offset: same shape, shifted along one axis only
    offset = rng.uniform(0.1, 0.9)
    if rng.uniform() < 0.5:
        return gt.shifted(offset * gt.w * rng.choice((-1, 1)), 0.0)
    return gt.shifted(0.0, offset * gt.h * rng.choice((-1, 1)))


def _accept(config: SimConfig, value: float) -> bool:
    if config.scenario is Scenario.high_iou_start:
        return value >= config.high_iou_min
    if config.scenario is Scenario.low_iou_start:
        return 0 < value <= config.low_iou_max
    if config.scenario is Scenario.uniform_random and config.require_overlap:
        return value > 0
    return True


def generate_pairs(config: SimConfig) -> PairList:
    """Deterministic (gt, anchor) pairs; scenario constraints via rejection sampling."""
    rng = np.random.default_rng(config.seed)
    pairs: PairList = []
    rejected = 0
    for index in range(config.n_pairs):
        gt = _random_gt(rng)
        for _ in range(config.max_attempts):
            anchor = _candidate(rng, gt, config.scenario)
            if _accept(config, iou(gt, anchor)):
                pairs.append((gt, anchor))
                break
            rejected += 1
        else:
            raise ScenarioUnsatisfiableError(
                f"{config.scenario.value}: no acceptable anchor for pair {index} after {config.max_attempts} attempts"
            )
    logfire.info("generated {n} pairs", n=len(pairs), scenario=config.scenario.value, rejected=rejected)
    return pairs


# ---------- descent ----------
def run_descent(pairs: Sequence[Tuple[BBox, BBox]], spec: LossSpec, config: SimConfig,
                label: Optional[str] = None) -> ConvergenceTrace:
    label = label or spec.label
    trace = ConvergenceTrace(label=label)
    params = np.array([anchor.params() for _, anchor in pairs], dtype=float)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2 = config.betas

    for step in range(config.steps):
        lr = config.lr * config.lr_decay ** step
        losses = np.empty(len(pairs))
        ious = np.empty(len(pairs))
        grads = np.empty_like(params)
        for i, (gt, _) in enumerate(pairs):
            pred = BBox(*params[i])
            result = compute_loss(gt, pred, spec)
            if not np.all(np.isfinite(result.grad)):
                logfire.error("descent diverged", loss=label, pair=i, step=step)
                raise DescentDivergedError(i, step, label)
            losses[i] = result.value
            ious[i] = iou(gt, pred)
            grads[i] = result.grad

        trace.loss_mean.append(float(np.mean(losses)))
        trace.iou_mean.append(float(np.mean(ious)))
        if trace.steps_to_threshold is None and trace.loss_mean[-1] < config.stop_loss:
            trace.steps_to_threshold = step

        if config.weight_decay:
            grads = grads + config.weight_decay * params
        if config.optimizer == "adam":
            m = b1 * m + (1 - b1) * grads
            v = b2 * v + (1 - b2) * grads * grads
            m_hat = m / (1 - b1 ** (step + 1))
            v_hat = v / (1 - b2 ** (step + 1))
            params = params - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        else:
            params = params - lr * grads
        # keep every anchor a valid box
        params[:, 2:] = np.maximum(params[:, 2:], config.wh_floor)

    return trace


def _unique_labels(specs: Sequence[LossSpec]) -> List[str]:
    seen: dict[str, int] = {}
    labels = []
    for spec in specs:
        n = seen.get(spec.label, 0) + 1
        seen[spec.label] = n
        labels.append(spec.label if n == 1 else f"{spec.label}#{n}")
    return labels


def compare_losses(config: SimConfig, threads: int = 1) -> ComparisonReport:
    """Run every configured loss on the same generated pairs."""
    if len(config.losses) < 2:
        raise ValueError("compare_losses needs at least 2 losses")
    pairs = generate_pairs(config)
    labels = _unique_labels(config.losses)
    with logfire.span("compare {n} losses", n=len(labels), scenario=config.scenario.value):
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            traces = list(pool.map(lambda item: run_descent(pairs, item[0], config, item[1]),
                                   zip(config.losses, labels)))
    rows = [
        SummaryRow(
            label=t.label,
            kind=spec.kind,
            ratio=spec.ratio,
            final_loss=t.final_loss,
            final_iou=t.final_iou,
            steps_to_threshold=t.steps_to_threshold,
            auc=t.auc,
        )
        for spec, t in zip(config.losses, traces)
    ]
    return ComparisonReport(config=config, traces=traces, rows=rows)


def ratio_sweep(config: SimConfig, ratios: Sequence[float], threads: int = 1) -> ComparisonReport:
    specs = [LossSpec(kind=LossKind.SIB_IoU, ratio=r) for r in ratios]
    return compare_losses(config.model_copy(update={"losses": specs}), threads=threads)
