"""YOLO-style label files and flat prediction files.

Labels: one ``<image_id>.txt`` per image, lines ``class_id cx cy w h``.
Predictions: one file, lines ``image_id class_id cx cy w h confidence``.
All box fields are normalized image coordinates.
"""
from __future__ import annotations
import math
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from ..errors import InvalidBoxError, ParseError
from ..geometry import BBox
from .metrics import Detection, DetectionSet, GroundTruth, GroundTruthSet, VISDRONE_CLASSES


def _lines(path: Path) -> Iterator[Tuple[int, List[str]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(path, 0, f"cannot read file: {e.strerror or e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if fields:
            yield lineno, fields


def _number(path: Path, lineno: int, name: str, raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(path, lineno, f"{name} is not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, lineno, f"{name} is not finite: {raw!r}")
    return value


def _class_id(path: Path, lineno: int, raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise ParseError(path, lineno, f"class_id is not an integer: {raw!r}") from None
    if value < 0:
        raise ParseError(path, lineno, f"class_id must be >= 0, got {value}")
    return value


def _box(path: Path, lineno: int, fields: Sequence[str]) -> BBox:
    cx, cy, w, h = (_number(path, lineno, n, f) for n, f in zip(("cx", "cy", "w", "h"), fields))
    try:
        return BBox(cx, cy, w, h)
    except InvalidBoxError as e:
        raise ParseError(path, lineno, str(e)) from None


def parse_label_file(path: Path | str, image_id: Optional[str] = None) -> List[GroundTruth]:
    path = Path(path)
    image_id = image_id or path.stem
    out: List[GroundTruth] = []
    for lineno, fields in _lines(path):
        if len(fields) != 5:
            raise ParseError(path, lineno, f"expected 5 fields (class_id cx cy w h), got {len(fields)}")
        out.append(GroundTruth(image_id, _class_id(path, lineno, fields[0]), _box(path, lineno, fields[1:])))
    return out


def resolve_class_names(spec: Optional[str | Sequence[str]]) -> Optional[Dict[int, str]]:
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec.lower() != "visdrone":
            raise ValueError(f"unknown class-name preset {spec!r}; use 'visdrone' or a list of names")
        spec = VISDRONE_CLASSES
    return dict(enumerate(spec))


def load_ground_truth(gt_dir: Path | str, class_names: Optional[Dict[int, str]] = None) -> GroundTruthSet:
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise ParseError(gt_dir, 0, "ground-truth directory does not exist")
    entries: List[GroundTruth] = []
    for path in sorted(gt_dir.glob("*.txt")):
        entries.extend(parse_label_file(path))
    try:
        return GroundTruthSet(entries, class_names)
    except InvalidBoxError as e:
        raise ParseError(gt_dir, 0, str(e)) from None


def load_predictions(path: Path | str) -> DetectionSet:
    path = Path(path)
    entries: List[Detection] = []
    for lineno, fields in _lines(path):
        if len(fields) != 7:
            raise ParseError(path, lineno, f"expected 7 fields (image_id class_id cx cy w h confidence), got {len(fields)}")
        conf = _number(path, lineno, "confidence", fields[6])
        if not 0.0 <= conf <= 1.0:
            raise ParseError(path, lineno, f"confidence must lie in [0, 1], got {conf}")
        entries.append(Detection(fields[0], _class_id(path, lineno, fields[1]), _box(path, lineno, fields[2:6]), conf))
    return DetectionSet(entries)


def format_label_line(t: GroundTruth) -> str:
    b = t.box
    return f"{t.class_id} {b.cx:.9g} {b.cy:.9g} {b.w:.9g} {b.h:.9g}"


def format_prediction_line(d: Detection) -> str:
    b = d.box
    return f"{d.image_id} {d.class_id} {b.cx:.9g} {b.cy:.9g} {b.w:.9g} {b.h:.9g} {d.confidence:.9g}"


def write_ground_truth(gt_dir: Path | str, gt: GroundTruthSet, image_ids: Sequence[str] = ()) -> None:
    """Write one label file per image; ``image_ids`` adds empty files for images without objects."""
    gt_dir = Path(gt_dir)
    gt_dir.mkdir(parents=True, exist_ok=True)
    per_image: Dict[str, List[str]] = {i: [] for i in image_ids}
    for t in gt.entries:
        per_image.setdefault(t.image_id, []).append(format_label_line(t))
    for image_id, lines in per_image.items():
        (gt_dir / f"{image_id}.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def write_predictions(path: Path | str, det: DetectionSet) -> None:
    Path(path).write_text("".join(format_prediction_line(d) + "\n" for d in det.entries), encoding="utf-8")
