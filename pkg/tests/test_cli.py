import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from detgeom.cli import build_parser, main, overrides_from_args, slug
from detgeom.config import RunConfig
from detgeom.geometry import BBox
from detgeom.services.datasets import write_ground_truth, write_predictions
from detgeom.services.involution import InvolutionKernel, Tensor4, save_array, save_tensor
from detgeom.services.metrics import Detection, DetectionSet, GroundTruth, GroundTruthSet


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path: Path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _flat(text: str) -> str:
    return " ".join(text.split())


def test_slug():
    assert slug("SIB-IoU(ratio=0.8)") == "SIB_IoU_ratio_0.8"
    assert slug("CIoU#2") == "CIoU_2"


def test_flag_overrides():
    args = build_parser().parse_args(["--seed", "3", "sim", "--pairs", "5", "--losses", "CIoU, SIoU"])
    out = overrides_from_args(args)
    assert out["seed"] == 3
    assert out["sim"] == {"seed": 3, "n_pairs": 5, "losses": ["CIoU", "SIoU"]}
    args = build_parser().parse_args(["layout", "--quiet"])
    assert overrides_from_args(args) == {"quiet": True}


# ---------- loss-eval ----------
def test_loss_eval_json(capsys):
    code = main(["loss-eval", "--gt", "0.5", "0.5", "0.4", "0.4", "--pred", "0.6", "0.6", "0.4", "0.4", "--json"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["loss"] == pytest.approx(0.5781884, abs=1e-7)
    assert out["kind"].startswith("SIB-IoU")
    assert len(out["grad"]) == 4


def test_loss_eval_kind_flag(capsys):
    code = main(["loss-eval", "--kind", "SIoU", "--gt", "0.5", "0.5", "0.4", "0.4",
                 "--pred", "0.6", "0.6", "0.4", "0.4", "--json"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["loss"] == pytest.approx(0.6283010, abs=1e-7)


def test_loss_eval_rejects_bad_ratio(capsys):
    code = main(["loss-eval", "--ratio", "2.0", "--gt", "0.5", "0.5", "0.4", "0.4",
                 "--pred", "0.6", "0.6", "0.4", "0.4"])
    assert code == 1
    assert "ratio out of [0.5, 1.5]" in _flat(capsys.readouterr().err)


def test_loss_eval_rejects_bad_box(capsys):
    code = main(["loss-eval", "--gt", "0.5", "0.5", "0", "0.4", "--pred", "0.6", "0.6", "0.4", "0.4"])
    assert code == 1
    assert "--gt" in capsys.readouterr().err


# ---------- grad-check ----------
def test_grad_check_zero_samples_passes(capsys):
    assert main(["grad-check", "--samples", "0"]) == 0
    assert "vacuous" in capsys.readouterr().err


def test_grad_check_small_run():
    assert main(["--quiet", "grad-check", "--samples", "40", "--kind", "SIB-IoU"]) == 0


def test_grad_check_rejects_zero_tolerance():
    assert main(["grad-check", "--tol", "0"]) == 1


# ---------- sim ----------
def test_sim_writes_artifacts_deterministically(tmp_path: Path):
    argv = ["--quiet", "--seed", "4", "--out", "run", "sim", "--pairs", "12", "--steps", "15", "--losses", "CIoU,SIB-IoU"]
    assert main(argv) == 0
    run = tmp_path / "run"
    traces = sorted(p.name for p in run.glob("trace_*.csv"))
    assert len(traces) == 2 and "trace_CIoU.csv" in traces
    lines = (run / "trace_CIoU.csv").read_text().splitlines()
    assert lines[0] == "step,loss_mean,iou_mean"
    assert len(lines) == 16
    summary = json.loads((run / "summary.json").read_text())
    assert summary["steps"] == 15 and summary["dominance_from_step"] == 14
    assert [r["label"] for r in summary["rows"]][0] == "CIoU"
    assert "sim:" in (run / "config.yaml").read_text()
    verdict = summary["verdicts"]["sib_vs_ciou"]
    assert (verdict["sib"], verdict["ciou"]) == ("SIB-IoU(ratio=1.15)", "CIoU")
    assert isinstance(verdict["fewer_steps"], bool) and isinstance(verdict["dominates"], bool)

    first = {p.name: p.read_bytes() for p in run.iterdir()}
    assert main(argv) == 0
    assert {p.name: p.read_bytes() for p in run.iterdir()} == first


def test_sim_ratio_sweep(tmp_path: Path):
    assert main(["--quiet", "--out", "sweep", "sim", "--pairs", "5", "--steps", "5", "--ratio-sweep", "0.7", "1.3"]) == 0
    names = sorted(p.name for p in (tmp_path / "sweep").glob("trace_*.csv"))
    assert names == ["trace_SIB_IoU_ratio_0.7.csv", "trace_SIB_IoU_ratio_1.3.csv"]
    ratio = json.loads((tmp_path / "sweep" / "summary.json").read_text())["verdicts"]["ratio"]
    assert ratio["below_one"] == "SIB-IoU(ratio=0.7)" and ratio["above_one"] == "SIB-IoU(ratio=1.3)"
    assert ratio["faster"] in (ratio["below_one"], ratio["above_one"])
    assert ratio["expected"] is None and ratio["as_expected"] is None


def test_sim_ratio_verdict_on_high_iou_start(tmp_path: Path):
    assert main(["--quiet", "--out", "sweep", "sim", "--scenario", "high_iou_start", "--pairs", "5", "--steps", "5",
                 "--ratio-sweep", "0.7", "1.3"]) == 0
    ratio = json.loads((tmp_path / "sweep" / "summary.json").read_text())["verdicts"]["ratio"]
    assert ratio["expected"] == "SIB-IoU(ratio=0.7)"
    assert ratio["as_expected"] == (ratio["faster"] == "SIB-IoU(ratio=0.7)")


# ---------- eval ----------
def _write_fixture(tmp_path: Path, gt: GroundTruthSet, det: DetectionSet):
    write_ground_truth(tmp_path / "labels", gt)
    write_predictions(tmp_path / "preds.txt", det)


def _summary(tmp_path: Path) -> dict:
    return json.loads((tmp_path / "out" / "summary.json").read_text())


def test_eval_perfect_fixture(tmp_path: Path):
    gt = GroundTruthSet([
        GroundTruth("im1", 0, BBox(0.3, 0.3, 0.2, 0.2)),
        GroundTruth("im1", 1, BBox(0.7, 0.7, 0.2, 0.2)),
        GroundTruth("im2", 0, BBox(0.5, 0.5, 0.4, 0.4)),
    ])
    det = DetectionSet([Detection(t.image_id, t.class_id, t.box, 0.9) for t in gt.entries])
    _write_fixture(tmp_path, gt, det)
    code = main(["--quiet", "--out", "out", "eval", "--gt-dir", "labels", "--pred-file", "preds.txt"])
    assert code == 0
    summary = _summary(tmp_path)
    assert summary["map50"] == 1.0 and summary["map50_95"] == 1.0
    assert summary["n_images"] == 2 and summary["n_truths"] == 3
    out = tmp_path / "out"
    for name in ("per_class_ap.csv", "curves_all.csv", "curves_class_0.csv", "curves_class_1.csv",
                 "confusion.csv", "confusion_normalized.csv", "config.yaml"):
        assert (out / name).is_file()
    header, row0 = (out / "per_class_ap.csv").read_text().splitlines()[:2]
    assert header == "class_id,name,truths,detections,precision,recall,ap50,ap75,ap50_95"
    assert row0 == "0,0,2,2,1,1,1,1,1"
    confusion = (out / "confusion.csv").read_text().splitlines()
    assert confusion[0] == "pred\\true,0,1,background"
    assert confusion[1] == "0,2,0,0"


def test_eval_is_byte_identical_across_runs(tmp_path: Path):
    gt = GroundTruthSet([
        GroundTruth("a", 0, BBox(0.3, 0.3, 0.2, 0.2)),
        GroundTruth("a", 1, BBox(0.7, 0.6, 0.3, 0.2)),
        GroundTruth("b", 0, BBox(0.5, 0.5, 0.4, 0.4)),
        GroundTruth("b", 2, BBox(0.2, 0.8, 0.1, 0.1)),
    ])
    det = DetectionSet([
        Detection("a", 0, BBox(0.31, 0.3, 0.2, 0.21), 0.9),
        Detection("a", 1, BBox(0.6, 0.6, 0.3, 0.2), 0.4),
        Detection("a", 0, BBox(0.7, 0.6, 0.3, 0.2), 0.7),
        Detection("b", 0, BBox(0.5, 0.52, 0.38, 0.4), 0.8),
        Detection("b", 2, BBox(0.6, 0.2, 0.1, 0.1), 0.3),
    ])
    _write_fixture(tmp_path, gt, det)
    runs = []
    for out in ("first", "second"):
        assert main(["--quiet", "--seed", "5", "--out", out, "eval", "--gt-dir", "labels",
                     "--pred-file", "preds.txt"]) == 0
        runs.append({p.name: p.read_bytes() for p in (tmp_path / out).iterdir()})
    first, second = runs
    assert sorted(first) == sorted(second)
    assert "summary.json" in first and "per_class_ap.csv" in first
    for name in first:
        if name == "config.yaml":
            continue
        assert first[name] == second[name], name
    # config.yaml records its own output dir and nothing else differs
    a, b = (yaml.safe_load(r["config.yaml"]) for r in runs)
    assert (a["paths"].pop("out_dir"), b["paths"].pop("out_dir")) == ("first", "second")
    assert a == b


def test_eval_micro_fixture(tmp_path: Path):
    gt = GroundTruthSet([
        GroundTruth("x", 0, BBox(0.3, 0.3, 0.2, 0.2)),
        GroundTruth("x", 0, BBox(0.7, 0.7, 0.2, 0.2)),
    ])
    det = DetectionSet([
        Detection("x", 0, BBox(0.3, 0.3, 0.2, 0.2), 0.9),
        Detection("x", 0, BBox(0.3, 0.31, 0.2, 0.2), 0.8),
    ])
    _write_fixture(tmp_path, gt, det)
    assert main(["--quiet", "--out", "out", "eval", "--gt-dir", "labels", "--pred-file", "preds.txt",
                 "--iou", "0.5"]) == 0
    summary = _summary(tmp_path)
    assert summary["map50"] == 0.5
    assert summary["map50_95"] is None
    # with NMS the duplicate goes away and precision is perfect
    assert main(["--quiet", "--out", "out", "eval", "--gt-dir", "labels", "--pred-file", "preds.txt",
                 "--iou", "0.5", "--nms"]) == 0
    assert _summary(tmp_path)["map50"] == 0.5
    assert _summary(tmp_path)["n_detections"] == 1


def test_eval_empty_predictions(tmp_path: Path):
    gt = GroundTruthSet([GroundTruth("x", 0, BBox(0.3, 0.3, 0.2, 0.2))])
    _write_fixture(tmp_path, gt, DetectionSet())
    assert main(["--quiet", "--out", "out", "eval", "--gt-dir", "labels", "--pred-file", "preds.txt"]) == 0
    assert _summary(tmp_path)["map50"] == 0.0


def test_eval_malformed_prediction_line(tmp_path: Path, capsys):
    gt = GroundTruthSet([GroundTruth("x", 0, BBox(0.3, 0.3, 0.2, 0.2))])
    _write_fixture(tmp_path, gt, DetectionSet())
    (tmp_path / "preds.txt").write_text("x 0 0.3 0.3 0.2 0.2 0.9\nx 0 0.3 0.3 0.2\n")
    assert main(["eval", "--gt-dir", "labels", "--pred-file", "preds.txt"]) == 1
    assert "preds.txt:2:" in capsys.readouterr().err


def test_eval_needs_paths(capsys):
    assert main(["eval"]) == 1
    assert "--gt-dir" in capsys.readouterr().err


def test_eval_unknown_class_with_names(tmp_path: Path):
    gt = GroundTruthSet([GroundTruth("x", 0, BBox(0.3, 0.3, 0.2, 0.2))])
    det = DetectionSet([Detection("x", 4, BBox(0.3, 0.3, 0.2, 0.2), 0.9)])
    _write_fixture(tmp_path, gt, det)
    assert main(["eval", "--gt-dir", "labels", "--pred-file", "preds.txt", "--class-names", "car,bus"]) == 1


def test_unwritable_output_dir(tmp_path: Path):
    gt = GroundTruthSet([GroundTruth("x", 0, BBox(0.3, 0.3, 0.2, 0.2))])
    _write_fixture(tmp_path, gt, DetectionSet())
    (tmp_path / "blocked").write_text("")
    assert main(["--out", "blocked", "eval", "--gt-dir", "labels", "--pred-file", "preds.txt"]) == 2


# ---------- involution-check ----------
def test_involution_check_delta_fixture(tmp_path: Path, capsys):
    fixture = tmp_path / "fx"
    fixture.mkdir()
    save_tensor(fixture / "x.dgt", Tensor4.random((1, 4, 5, 5), seed=2))
    save_array(fixture / "kernel.dgt", InvolutionKernel.delta(5, 5, 3, groups=2).data)
    assert main(["involution-check", "--fixture", "fx"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_involution_check_random():
    assert main(["--quiet", "involution-check", "--random"]) == 0
    assert main(["--quiet", "--seed", "9", "involution-check", "--random", "--generated",
                 "--dims", "2", "4", "3", "4"]) == 0


def test_involution_check_group_mismatch(capsys):
    assert main(["involution-check", "--random", "--dims", "1", "5", "4", "4", "--groups", "2"]) == 1
    assert "channels not divisible by groups" in _flat(capsys.readouterr().err)


def test_involution_check_missing_fixture(tmp_path: Path):
    (tmp_path / "empty").mkdir()
    assert main(["involution-check", "--fixture", "empty"]) == 1


def test_involution_check_needs_a_source():
    assert main(["involution-check"]) == 1


# ---------- layout and config ----------
def test_layout(capsys):
    assert main(["layout"]) == 0
    out = capsys.readouterr().out
    assert "P1" in out and "P5" in out
    assert main(["layout", "--preset", "baseline"]) == 0
    assert "P1" not in capsys.readouterr().out


def test_layout_from_config(tmp_path: Path, capsys):
    (tmp_path / "cfg.yaml").write_text("layout:\n  preset: p2\n  input_size: 320\n")
    assert main(["--config", "cfg.yaml", "layout"]) == 0
    out = capsys.readouterr().out
    assert "P2" in out and "P1" not in out


def test_config_errors(tmp_path: Path, capsys):
    (tmp_path / "bad.yaml").write_text("bogus: 1\n")
    assert main(["--config", "bad.yaml", "layout"]) == 1
    assert "bogus" in capsys.readouterr().err
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert main(["--config", "list.yaml", "layout"]) == 1
    assert main(["--config", "missing.yaml", "layout"]) == 1


def test_config_seed_reaches_the_simulator():
    assert RunConfig.model_validate({"seed": 7}).sim.seed == 7
    assert RunConfig.model_validate({"seed": 7, "sim": {"n_pairs": 3}}).sim.seed == 7
    assert RunConfig.model_validate({"seed": 7, "sim": {"seed": 2}}).sim.seed == 2
    assert RunConfig.model_validate({"sim": {"seed": 2}}).sim.seed == 2
    assert RunConfig.model_validate({}).sim.seed == 0


def test_sim_uses_the_config_file_seed(tmp_path: Path):
    (tmp_path / "cfg.yaml").write_text("seed: 7\nsim:\n  n_pairs: 4\n  steps: 3\n")
    assert main(["--quiet", "--config", "cfg.yaml", "--out", "run", "sim"]) == 0
    dumped = yaml.safe_load((tmp_path / "run" / "config.yaml").read_text())
    assert dumped["seed"] == 7 and dumped["sim"]["seed"] == 7
    assert main(["--quiet", "--config", "cfg.yaml", "--out", "seeded", "sim"]) == 0
    assert main(["--quiet", "--seed", "7", "--out", "flag", "sim", "--pairs", "4", "--steps", "3"]) == 0
    same = (tmp_path / "seeded" / "trace_CIoU.csv").read_bytes()
    assert same == (tmp_path / "flag" / "trace_CIoU.csv").read_bytes()


def test_thread_env_is_validated(monkeypatch):
    monkeypatch.setenv("DETGEOM_THREADS", "zero")
    assert main(["layout"]) == 1


def test_unknown_subcommand():
    assert main(["train"]) == 1
    assert main([]) == 1
