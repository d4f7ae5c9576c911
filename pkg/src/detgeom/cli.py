from __future__ import annotations
import argparse
import json
import re
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import logfire
import numpy as np
from pydantic import ValidationError

from . import ui
from .config import RunConfig
from .errors import ParseError, UsageError
from .geometry import BBox, iou
from .services.datasets import load_ground_truth, load_predictions, resolve_class_names
from .services.heads import PRESETS, HeadLayout, grid_centers, nms
from .services.involution import (
    InvolutionKernel,
    KernelGenSpec,
    Tensor4,
    generate_kernel,
    involute,
    involute_naive,
    load_kernel,
    load_tensor,
)
from .services.losses import LossKind, check_gradient, compute_loss, inner_iou, siou_components
from .services.metrics import (
    COCO_THRESHOLDS,
    Detection,
    DetectionSet,
    GroundTruthSet,
    Interp,
    MeanAPReport,
    confusion,
    curve_bundle,
    mean_ap,
    threshold_key,
)
from .services.outputs import ArtifactDir
from .services.simulator import ComparisonReport, Scenario, SimConfig, compare_losses, generate_pairs, ratio_sweep

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
INVOLUTION_TOLERANCE = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {raw!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {raw}")
    return value


def _non_negative_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {raw!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {raw}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="Run config YAML")
    common.add_argument("--seed", type=int, help="Seed for every random draw of the run")
    common.add_argument("--out", type=Path, help="Artifact directory (overrides paths.out_dir)")
    common.add_argument("--quiet", action="store_true", help="Suppress tables; errors still print")

    parser = _Parser(prog="detgeom", description="Box-regression losses, evaluation metrics and head geometry",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def loss_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--kind", help="Loss kind, e.g. SIB-IoU, SIoU, CIoU")
        p.add_argument("--ratio", type=float, help="Auxiliary-box scale, [0.5, 1.5]")
        p.add_argument("--theta", type=float, help="Shape-cost exponent")
        p.add_argument("--epsilon", type=float, help="Angle-cost stabilizer")
        p.add_argument("--shape-sign", choices=["as_printed", "corrected"])

    p = sub.add_parser("loss-eval", parents=[common], help="Print one pair's loss breakdown")
    p.add_argument("--gt", nargs=4, type=float, required=True, metavar=("CX", "CY", "W", "H"))
    p.add_argument("--pred", nargs=4, type=float, required=True, metavar=("CX", "CY", "W", "H"))
    p.add_argument("--json", action="store_true", help="Print the breakdown as JSON")
    loss_flags(p)

    p = sub.add_parser("grad-check", parents=[common], help="Analytic vs finite-difference gradients")
    p.add_argument("--kind", default="all", help="Loss kind or 'all'")
    p.add_argument("--ratio", type=float)
    p.add_argument("--samples", type=_non_negative_int, default=1000)
    p.add_argument("--tol", type=_positive_float, default=1e-4, help="Relative tolerance, > 0")
    p.add_argument("--step", type=_positive_float, default=1e-6, help="Central-difference step")

    p = sub.add_parser("sim", parents=[common], help="Run the regression simulator")
    p.add_argument("--losses", help="Comma-separated kinds, or 'ablation'")
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.add_argument("--pairs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--optimizer", choices=["gd", "adam"])
    p.add_argument("--ratio-sweep", type=float, nargs="+", metavar="RATIO",
                   help="Compare SIB-IoU at these auxiliary ratios instead of the configured losses")

    p = sub.add_parser("eval", parents=[common], help="Evaluate predictions against YOLO labels")
    p.add_argument("--gt-dir", type=Path)
    p.add_argument("--pred-file", type=Path)
    p.add_argument("--iou", type=float, nargs="+", metavar="T", help="IoU thresholds (default 0.50:0.95)")
    p.add_argument("--interp", choices=[i.value for i in Interp])
    p.add_argument("--class-names", help="'visdrone' or comma-separated names")
    p.add_argument("--nms", action="store_true", help="Apply per-image NMS to predictions first")

    p = sub.add_parser("involution-check", parents=[common], help="Vectorized involution vs loop oracle")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--fixture", type=Path, help="Directory holding x.dgt and kernel.dgt")
    src.add_argument("--random", action="store_true", help="Seeded random input and kernel")
    p.add_argument("--dims", type=int, nargs=4, default=[1, 4, 5, 5], metavar=("N", "C", "H", "W"))
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--generated", action="store_true", help="Generate the kernel from the input")

    p = sub.add_parser("layout", parents=[common], help="Print detection-head grids")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--input-size", type=int)
    return parser


def _drop_none(d: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in d.items() if v is not None}


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values layered over the config file."""
    out: Dict[str, Any] = {}
    seed = getattr(args, "seed", None)
    if seed is not None:
        out["seed"] = seed
        out["sim"] = {"seed": seed}
    if getattr(args, "out", None) is not None:
        out["paths"] = {"out_dir": str(args.out)}
    if getattr(args, "quiet", False):
        out["quiet"] = True

    if args.command == "loss-eval":
        loss = _drop_none({
            "kind": args.kind, "ratio": args.ratio, "theta": args.theta,
            "epsilon": args.epsilon, "shape_sign": args.shape_sign,
        })
        if loss:
            out["loss"] = loss
    elif args.command == "grad-check" and args.ratio is not None:
        out["loss"] = {"ratio": args.ratio}
    elif args.command == "sim":
        sim = _drop_none({
            "scenario": args.scenario, "n_pairs": args.pairs, "steps": args.steps, "optimizer": args.optimizer,
        })
        if args.losses:
            sim["losses"] = "ablation" if args.losses == "ablation" else [s.strip() for s in args.losses.split(",")]
        out.setdefault("sim", {}).update(sim)
    elif args.command == "eval":
        paths = _drop_none({"gt_dir": args.gt_dir and str(args.gt_dir),
                            "pred_file": args.pred_file and str(args.pred_file)})
        out.setdefault("paths", {}).update(paths)
        ev = _drop_none({"iou_thresholds": args.iou, "interp": args.interp})
        if args.class_names:
            names = args.class_names
            ev["class_names"] = names if names == "visdrone" else [n.strip() for n in names.split(",")]
        if ev:
            out["eval"] = ev
    return out


def slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", label).strip("_")


def _format_validation(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "config"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _box(flag: str, values: Sequence[float]) -> BBox:
    try:
        return BBox(*values)
    except ValueError as e:
        raise UsageError(f"{flag}: {e}") from None


def apply_nms(det: DetectionSet, iou_threshold: float) -> DetectionSet:
    """Per-image, per-class greedy suppression; image order is preserved."""
    by_image: Dict[str, List[Detection]] = {}
    for d in det.entries:
        by_image.setdefault(d.image_id, []).append(d)
    kept: List[Detection] = []
    for image_id, items in by_image.items():
        for k in nms([(d.box, d.class_id, d.confidence) for d in items], iou_threshold):
            kept.append(Detection(image_id, k.class_id, k.box, k.confidence))
    return DetectionSet(kept)


class DetGeomApp:
    """Runs one subcommand against a resolved config."""

    def __init__(self, cfg: RunConfig | None = None):
        self.cfg = cfg or RunConfig.load()
        self.out = ArtifactDir(Path(self.cfg.paths.out_dir))

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "DetGeomApp":
        return cls(RunConfig.load(getattr(args, "config", None), overrides_from_args(args)))

    def dispatch(self, args: argparse.Namespace) -> int:
        handler = {
            "loss-eval": self.cmd_loss_eval,
            "grad-check": self.cmd_grad_check,
            "sim": self.cmd_sim,
            "eval": self.cmd_eval,
            "involution-check": self.cmd_involution_check,
            "layout": self.cmd_layout,
        }[args.command]
        if not self.quiet and not getattr(args, "json", False):
            ui.banner(args.command, f"seed={self.cfg.seed}  threads={self.cfg.threads}")
        with logfire.span("detgeom {command}", command=args.command):
            return handler(args)

    @property
    def quiet(self) -> bool:
        return self.cfg.quiet

    # ---------- loss-eval ----------
    def cmd_loss_eval(self, args: argparse.Namespace) -> int:
        gt, pred = _box("--gt", args.gt), _box("--pred", args.pred)
        spec = self.cfg.loss
        comps = siou_components(gt, pred, spec)
        result = compute_loss(gt, pred, spec)
        breakdown = {
            "kind": spec.label,
            "iou": iou(gt, pred),
            "angle_cost": comps.lam,
            "gamma": comps.gamma,
            "distance_cost": comps.delta,
            "shape_cost": comps.omega,
            "inner_iou": inner_iou(gt, pred, spec.ratio),
            "loss": result.value,
            "grad": [float(g) for g in result.grad],
            "nonsmooth": result.nonsmooth,
        }
        if args.json:
            print(json.dumps(breakdown, sort_keys=True))
        elif not self.quiet:
            ui.fields_panel(spec.label, [
                ("IoU", ui.num(breakdown["iou"])),
                ("Λ angle", ui.num(comps.lam)),
                ("γ", ui.num(comps.gamma)),
                ("Δ distance", ui.num(comps.delta)),
                ("Ω shape", ui.num(comps.omega)),
                ("IoU inner", ui.num(breakdown["inner_iou"])),
                ("loss", ui.num(result.value)),
                ("∂L/∂(cx, cy, w, h)", "(" + ", ".join(ui.num(g) for g in breakdown["grad"]) + ")"),
                ("non-smooth", str(result.nonsmooth)),
            ])
        return EXIT_OK

    # ---------- grad-check ----------
    def cmd_grad_check(self, args: argparse.Namespace) -> int:
        kinds = list(LossKind) if args.kind.lower() == "all" else [LossKind.parse(args.kind)]
        if args.samples == 0:
            logfire.warn("n_samples 0: nothing to check", kinds=[k.value for k in kinds])
            ui.warn("n_samples is 0; vacuous pass")
            return EXIT_OK
        pairs = generate_pairs(SimConfig(n_pairs=args.samples, seed=self.cfg.seed, require_overlap=False))
        rows, failures = [], []
        for kind in kinds:
            spec = self.cfg.loss.model_copy(update={"kind": kind})
            worst, skipped, failed = 0.0, 0, 0
            for i, (gt, pred) in enumerate(pairs):
                check = check_gradient(gt, pred, spec, args.step)
                if not check.smooth:
                    skipped += 1
                    continue
                worst = max(worst, check.rel_error)
                if check.rel_error > args.tol:
                    failed += 1
                    failures.append((spec.label, i, check.rel_error))
            rows.append((spec.label, len(pairs) - skipped, skipped, worst, failed))
            logfire.info("grad-check {kind}", kind=spec.label, worst=worst, skipped=skipped, failed=failed)

        passed = not failures
        if not self.quiet:
            ui.table("gradient check", ["loss", "checked", "non-smooth", "worst rel. error", "failures"], rows)
            for label, i, err in failures[:20]:
                gt, pred = pairs[i]
                ui.console.print(f"  [err]{label}[/err] pair {i}: rel. error {ui.num(err)}  gt={gt.params()} pred={pred.params()}")
        ui.verdict(passed, f"{len(kinds)} kinds x {len(pairs)} pairs, tolerance {args.tol:g}")
        return EXIT_OK if passed else EXIT_RUNTIME

    # ---------- sim ----------
    def cmd_sim(self, args: argparse.Namespace) -> int:
        started = time.perf_counter()
        if args.ratio_sweep:
            report = ratio_sweep(self.cfg.sim, args.ratio_sweep, threads=self.cfg.threads)
        else:
            report = compare_losses(self.cfg.sim, threads=self.cfg.threads)
        written = self.write_sim_artifacts(report)
        if not self.quiet:
            ui.table(
                f"regression sim · {report.config.scenario.value} · {report.config.n_pairs} pairs",
                ["loss", "final loss", "final IoU", "steps to threshold", "loss AUC"],
                [(r.label, r.final_loss, r.final_iou, "-" if r.steps_to_threshold is None else r.steps_to_threshold,
                  r.auc) for r in report.rows],
            )
            ui.artifacts(str(self.out.root), written)
            ui.console.print(f"[muted]done in {time.perf_counter() - started:.2f}s[/muted]")
        return EXIT_OK

    def write_sim_artifacts(self, report: ComparisonReport) -> List[str]:
        self.out.ensure()
        written = []
        for t in report.traces:
            name = f"trace_{slug(t.label)}.csv"
            self.out.write_csv(name, ["step", "loss_mean", "iou_mean"],
                               ((i, l, u) for i, (l, u) in enumerate(zip(t.loss_mean, t.iou_mean))))
            written.append(name)
        from_step = min(50, report.config.steps - 1)
        summary = {
            "scenario": report.config.scenario.value,
            "n_pairs": report.config.n_pairs,
            "steps": report.config.steps,
            "stop_loss": report.config.stop_loss,
            "dominance_from_step": from_step,
            "rows": [
                {
                    **row.model_dump(mode="json"),
                    "dominates": [o.label for o in report.rows
                                  if o.label != row.label and report.dominates(row.label, o.label, from_step)],
                }
                for row in report.rows
            ],
            "verdicts": report.verdicts(from_step),
        }
        for name, verdict in summary["verdicts"].items():
            if verdict.get("dominates") is False or verdict.get("as_expected") is False:
                logfire.warn("convergence ordering not reproduced: {name}", name=name, **verdict)
        self.out.write_json("summary.json", summary)
        self.out.write_text("config.yaml", self.cfg.dump_yaml())
        return written + ["summary.json", "config.yaml"]

    # ---------- eval ----------
    def cmd_eval(self, args: argparse.Namespace) -> int:
        paths = self.cfg.paths
        if paths.gt_dir is None or paths.pred_file is None:
            raise UsageError("eval needs --gt-dir and --pred-file (or paths.gt_dir / paths.pred_file)")
        names = resolve_class_names(self.cfg.eval.class_names)
        gt = load_ground_truth(paths.gt_dir, names)
        det = load_predictions(paths.pred_file)
        if args.nms:
            before = len(det)
            det = apply_nms(det, self.cfg.eval.nms_iou)
            logfire.info("nms kept {kept} of {total}", kept=len(det), total=before)
        if names is not None:
            unknown = sorted({d.class_id for d in det.entries} - set(names))
            if unknown:
                raise ParseError(paths.pred_file, 0, f"class ids {unknown} outside the class table")

        report = mean_ap(gt, det, self.cfg.eval.iou_thresholds, self.cfg.eval.interp)
        written = self.write_eval_artifacts(gt, det, report)
        if not self.quiet:
            ui.table(
                "per-class AP",
                ["class", "truths", "dets", "P", "R", "AP50", "AP75", "AP50:95"],
                [(r.name, r.truths, r.detections, r.precision, r.recall,
                  *(("-" if v is None else v) for v in _row_aps(r.ap))) for r in report.rows],
            )
            summary = _summary_maps(report)
            ui.fields_panel("mAP", [(k, "-" if v is None else ui.num(v)) for k, v in summary.items()])
            for note in report.notes:
                ui.warn(note)
            ui.artifacts(str(self.out.root), written)
        return EXIT_OK

    def write_eval_artifacts(self, gt: GroundTruthSet, det: DetectionSet, report: MeanAPReport) -> List[str]:
        ev = self.cfg.eval
        self.out.ensure()
        written = []

        self.out.write_csv(
            "per_class_ap.csv",
            ["class_id", "name", "truths", "detections", "precision", "recall", "ap50", "ap75", "ap50_95"],
            [(r.class_id, r.name, r.truths, r.detections, r.precision, r.recall, *_row_aps(r.ap))
             for r in report.rows],
        )
        written.append("per_class_ap.csv")

        bundle = curve_bundle(gt, det, ev.curve_iou)
        header = ["confidence", "precision", "recall", "f1"]
        series = [("curves_all.csv", bundle.aggregate)] + [
            (f"curves_class_{c}.csv", s) for c, s in sorted(bundle.per_class.items())
        ]
        for name, s in series:
            self.out.write_csv(name, header, zip(s.confidence, s.precision, s.recall, s.f1))
            written.append(name)

        num_classes = len(gt.class_names) if gt.class_names else None
        cm = confusion(gt, det, ev.confusion_iou, ev.confusion_conf, num_classes)
        self.out.write_csv("confusion.csv", ["pred\\true", *cm.names],
                           ([n, *row.tolist()] for n, row in zip(cm.names, cm.counts)))
        self.out.write_csv("confusion_normalized.csv", ["pred\\true", *cm.names],
                           ([n, *row.tolist()] for n, row in zip(cm.names, cm.normalized())))
        written += ["confusion.csv", "confusion_normalized.csv"]

        summary = {
            **_summary_maps(report),
            "map_by_threshold": report.map_by_threshold,
            "interp": report.interp.value,
            "n_images": len({t.image_id for t in gt.entries} | {d.image_id for d in det.entries}),
            "n_truths": len(gt),
            "n_detections": len(det),
            "notes": report.notes,
        }
        self.out.write_json("summary.json", summary)
        self.out.write_text("config.yaml", self.cfg.dump_yaml())
        return written + ["summary.json", "config.yaml"]

    # ---------- involution-check ----------
    def cmd_involution_check(self, args: argparse.Namespace) -> int:
        if args.fixture is not None:
            x_path, k_path = args.fixture / "x.dgt", args.fixture / "kernel.dgt"
            for p in (x_path, k_path):
                if not p.is_file():
                    raise ParseError(p, 0, "missing fixture file")
            x, kernel = load_tensor(x_path), load_kernel(k_path)
            source = str(args.fixture)
        else:
            n, c, h, w = args.dims
            x = Tensor4.random((n, c, h, w), self.cfg.seed)
            if args.generated:
                spec = KernelGenSpec.random(c, args.kernel_size, args.groups, reduction=1, seed=self.cfg.seed + 1)
                kernel = generate_kernel(x, spec)
            else:
                kernel = InvolutionKernel.random(h, w, args.kernel_size, args.groups, self.cfg.seed + 1)
            source = f"random seed={self.cfg.seed}"

        fast, ref = involute(x, kernel), involute_naive(x, kernel)
        deviation = float(np.max(np.abs(fast.data - ref.data)))
        passed = deviation < INVOLUTION_TOLERANCE
        logfire.info("involution check", deviation=deviation, dims=list(x.dims), k=kernel.size, g=kernel.groups)
        if not self.quiet:
            ui.fields_panel("involution check", [
                ("source", source),
                ("input (N, C, H, W)", str(x.dims)),
                ("kernel", f"K={kernel.size} G={kernel.groups}" + (" batched" if kernel.data.ndim == 6 else "")),
                ("max |fast - loop|", ui.num(deviation)),
            ], ok=passed)
        ui.verdict(passed, f"deviation {deviation:.3g} vs tolerance {INVOLUTION_TOLERANCE:g}")
        return EXIT_OK if passed else EXIT_RUNTIME

    # ---------- layout ----------
    def cmd_layout(self, args: argparse.Namespace) -> int:
        layout = self.cfg.layout
        if args.preset:
            layout = HeadLayout.preset(args.preset, args.input_size or layout.input_size)
        elif args.input_size:
            layout = HeadLayout.preset("p1p2", args.input_size)
        if not self.quiet:
            rows = []
            for h in layout.heads:
                centers = grid_centers(layout, h.name)
                rows.append((h.name, f"{h.grid_h}x{h.grid_w}", h.stride, h.cells,
                             f"({centers[0][0]:g}, {centers[0][1]:g})", f"({centers[-1][0]:g}, {centers[-1][1]:g})"))
            ui.table(f"head layout · input {layout.input_size}",
                     ["head", "grid", "stride", "cells", "first center", "last center"], rows)
            ui.console.print(f"[muted]total cells:[/muted] [value]{layout.total_cells}[/value]")
        return EXIT_OK


def _row_aps(ap: Dict[str, float]) -> tuple:
    ap5095 = _coco_mean(ap)
    return ap.get(threshold_key(0.5)), ap.get(threshold_key(0.75)), ap5095


def _coco_mean(values: Dict[str, float]) -> Optional[float]:
    keys = [threshold_key(t) for t in COCO_THRESHOLDS]
    if not all(k in values for k in keys):
        return None
    return float(np.mean([values[k] for k in keys]))


def _summary_maps(report: MeanAPReport) -> Dict[str, Optional[float]]:
    return {
        "map50": report.at(0.5),
        "map75": report.at(0.75),
        "map50_95": _coco_mean(report.map_by_threshold),
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        app = DetGeomApp.from_args(args)
        return app.dispatch(args)
    except ValidationError as e:
        ui.error(_format_validation(e))
        return EXIT_INVALID
    except (ValueError, KeyError) as e:
        ui.error(str(e))
        return EXIT_INVALID
    except (RuntimeError, OSError, AssertionError) as e:
        logfire.error("run failed: {error}", error=str(e))
        ui.error(str(e))
        return EXIT_RUNTIME
