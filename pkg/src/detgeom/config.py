import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import logfire
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .services.heads import HeadLayout
from .services.losses import LossSpec
from .services.metrics import COCO_THRESHOLDS, Interp
from .services.simulator import SimConfig


def _env_threads() -> int:
    raw = os.getenv("DETGEOM_THREADS")
    if raw is None or not raw.strip():
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"DETGEOM_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"DETGEOM_THREADS must be a positive integer, got {raw!r}")
    return value


def _env_flag(name: str) -> bool:
    return os.getenv(name, "false").strip().lower() in {"1", "true", "yes", "on"}


def _unit_interval(v: float) -> float:
    if not 0.0 < v < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {v}")
    return v


class EvalSettings(BaseModel):
    """Thresholds and naming for ``eval``."""
    model_config = ConfigDict(extra="forbid")

    iou_thresholds: List[float] = Field(default_factory=lambda: list(COCO_THRESHOLDS), min_length=1)
    interp: Interp = Interp.all_points
    curve_iou: float = 0.5
    confusion_iou: float = 0.45
    confusion_conf: float = 0.25
    nms_iou: float = 0.45
    class_names: Optional[Union[Literal["visdrone"], List[str]]] = None

    @field_validator("curve_iou", "confusion_iou", "confusion_conf", "nms_iou")
    @classmethod
    def _check_threshold(cls, v: float) -> float:
        return _unit_interval(v)

    @field_validator("iou_thresholds")
    @classmethod
    def _check_thresholds(cls, v: List[float]) -> List[float]:
        return [_unit_interval(t) for t in v]


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gt_dir: Optional[Path] = None
    pred_file: Optional[Path] = None
    out_dir: Path = Path("runs")


class RunConfig(BaseModel):
    """Everything one run needs; file values sit between env defaults and CLI flags."""
    model_config = ConfigDict(extra="forbid")

    loss: LossSpec = Field(default_factory=LossSpec)
    sim: SimConfig = Field(default_factory=SimConfig)
    layout: HeadLayout = Field(default_factory=HeadLayout)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = 0
    threads: int = Field(default_factory=_env_threads, ge=1)
    quiet: bool = False
    logfire_console: bool = Field(default_factory=lambda: _env_flag("DETGEOM_LOGFIRE_CONSOLE"))

    @model_validator(mode="before")
    @classmethod
    def _share_seed(cls, data):
        # a top-level seed also seeds the simulator unless sim.seed is given
        if not isinstance(data, dict) or "seed" not in data:
            return data
        sim = data.get("sim")
        if sim is None:
            return {**data, "sim": {"seed": data["seed"]}}
        if isinstance(sim, dict) and "seed" not in sim:
            return {**data, "sim": {**sim, "seed": data["seed"]}}
        return data

    @field_validator("layout", mode="before")
    @classmethod
    def _expand_preset(cls, v):
        # {"preset": "p2", "input_size": 640} is shorthand for the full head list
        if isinstance(v, dict) and "preset" in v:
            rest = {k: val for k, val in v.items() if k != "preset"}
            if set(rest) - {"input_size"}:
                raise ValueError("layout.preset only combines with layout.input_size")
            return HeadLayout.preset(v["preset"], rest.get("input_size", 640))
        return v

    @classmethod
    def load(cls, path: Optional[Path | str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        load_dotenv()
        data: Dict[str, Any] = {}
        if path is not None:
            data = read_yaml(Path(path))
        cfg = cls.model_validate(merge(data, overrides or {}))
        logfire.configure(
            send_to_logfire="if-token-present",
            console=None if cfg.logfire_console else False,
        )
        return cfg

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def read_yaml(path: Path) -> Dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ValueError(f"cannot read config {path}: {e.strerror or e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ValueError(f"config {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping at the top level")
    return data


def merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; ``overrides`` wins."""
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out
