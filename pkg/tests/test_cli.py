"""CLI pipeline: synthgen -> train -> eval -> predict, exit codes, atomicity."""

import json

import numpy as np
import pytest

from elevmap.cli import main
from elevmap.config import RunConfig
from elevmap.evalkit import EvalReport

TINY = RunConfig(
    image_size=16, grid_rows=8, grid_cols=8,
    backbone_widths=(4, 6, 8, 10, 12), proj_dims=(8, 6, 4),
    query_channels=6, decoder_width=8,
    train_steps=3, checkpoint_every=0, log_every=1,
)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synthgen + train run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    run = root / "run"
    cfg_path = root / "tiny.json"
    TINY.to_json(cfg_path)
    assert main([
        "synthgen", "--out", str(ds), "--seed", "21", "--style", "hilly",
        "--frames", "4", "--image-size", "16", "--grid-rows", "8",
        "--grid-cols", "8", "--extent", "400",
    ]) == 0
    assert main([
        "train", "--dataset", str(ds), "--out", str(run), "--config", str(cfg_path),
    ]) == 0
    return root, ds, run


def test_synthgen_layout(pipeline):
    _, ds, _ = pipeline
    manifest = json.load(open(ds / "manifest.json"))
    assert manifest["frame_count"] == 4
    assert (ds / "rig.json").exists()
    assert (ds / "frames" / "000003" / "front.png").exists()


def test_train_artifacts(pipeline):
    _, _, run = pipeline
    assert (run / "ckpt_final.npz").exists()
    assert (run / "train_log.jsonl").exists()


def test_eval_checkpoint(pipeline):
    root, ds, run = pipeline
    out = root / "report.json"
    assert main([
        "eval", "--dataset", str(ds), "--checkpoint", str(run / "ckpt_final.npz"),
        "--out", str(out),
    ]) == 0
    report = EvalReport.from_json(out)
    assert report.frames == 4
    assert all(np.isfinite(v) for v in report.mae_bands.values())


def test_eval_gt_as_pred_zero_error(pipeline):
    root, ds, _ = pipeline
    out = root / "gt_report.json"
    assert main(["eval", "--dataset", str(ds), "--gt-as-pred", "--out", str(out)]) == 0
    report = EvalReport.from_json(out)
    assert all(v == 0.0 for v in report.mae_bands.values())
    assert report.sdr == 0.0
    assert report.mtc < 0.05


def test_predict_frame_zero(pipeline):
    root, ds, run = pipeline
    out_prefix = root / "pred" / "frame0"
    assert main([
        "predict", "--checkpoint", str(run / "ckpt_final.npz"),
        "--frame-dir", str(ds / "frames" / "000000"), "--out", str(out_prefix),
    ]) == 0
    assert out_prefix.with_suffix(".json").exists()
    assert out_prefix.with_suffix(".bin").exists()
    assert out_prefix.with_suffix(".png").exists()
    from elevmap.mapspace import load_elevation_map

    pred = load_elevation_map(out_prefix)
    assert pred.values.shape == (8, 8)
    assert pred.values[pred.grid.anchor] == 0.0


def test_unknown_flag_is_usage_error(pipeline):
    _, ds, _ = pipeline
    assert main(["eval", "--dataset", str(ds), "--no-such-flag"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["synthgen"]) == 1  # missing required --out


def test_runtime_failures_exit_2(pipeline, tmp_path):
    assert main(["eval", "--dataset", str(tmp_path / "missing"), "--gt-as-pred"]) == 2
    _, ds, _ = pipeline
    assert main(["eval", "--dataset", str(ds)]) == 2  # checkpoint required
    # refusing to overwrite an existing dataset is a runtime failure
    assert main([
        "synthgen", "--out", str(ds), "--frames", "1", "--image-size", "16",
        "--grid-rows", "8", "--grid-cols", "8", "--extent", "400",
    ]) == 2


def test_ablate_sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    ds = root / "ds"
    cfg_path = root / "tiny.json"
    TINY.replace(train_steps=2).to_json(cfg_path)
    assert main([
        "synthgen", "--out", str(ds), "--seed", "3", "--frames", "3",
        "--image-size", "16", "--grid-rows", "8", "--grid-cols", "8",
        "--extent", "400",
    ]) == 0
    assert main([
        "ablate", "--dataset", str(ds), "--eval-dataset", str(ds),
        "--out", str(root / "sweep"), "--config", str(cfg_path),
    ]) == 0
    summary = json.load(open(root / "sweep" / "ablation_summary.json"))
    assert len(summary) == 4
    switches = {(r["switches"]["use_ope"], r["switches"]["use_history"]) for r in summary}
    assert switches == {(False, False), (True, False), (False, True), (True, True)}
