"""Training loop determinism, checkpointing, evaluation, config fingerprints."""

import json

import numpy as np
import pytest

from elevmap.camera import default_rig
from elevmap.config import RunConfig
from elevmap.errors import ConfigurationError, TrainingError
from elevmap.harness import (
    Adam,
    ablation_rows,
    evaluate,
    frame_gradient,
    load_checkpoint,
    save_checkpoint,
    train,
)
from elevmap.mapspace import GridSpec
from elevmap.model import ElevationNet
from elevmap.objective import LossWeights, loss_total
from elevmap.synthworld import generate_sequence, generate_terrain, read_dataset, write_dataset

TINY = RunConfig(
    image_size=16, grid_rows=8, grid_cols=8,
    backbone_widths=(4, 6, 8, 10, 12), proj_dims=(8, 6, 4),
    query_channels=6, decoder_width=8,
    train_steps=6, checkpoint_every=3, log_every=1,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    terrain = generate_terrain(21, "hilly", extent_m=400.0)
    rig = default_rig(16)
    grid = GridSpec(8, 8, 1.0)
    samples = generate_sequence(terrain, rig, grid, trajectory_seed=21, num_frames=4)
    out = tmp_path_factory.mktemp("ds") / "tiny"
    write_dataset(samples, out, rig, grid)
    return read_dataset(out)


# --- config fingerprints -------------------------------------------------------


def test_fingerprint_stable_and_sensitive():
    a, b = RunConfig(), RunConfig()
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != RunConfig(query_channels=16).fingerprint()
    assert a.fingerprint() != RunConfig(use_ope=False).fingerprint()


def test_fingerprint_ignores_paths():
    assert RunConfig().fingerprint() == RunConfig(train_dataset="/x", out_dir="/y").fingerprint()


def test_config_json_round_trip(tmp_path):
    cfg = RunConfig(image_size=32, lambda_tc=0.2, use_history=False)
    cfg.to_json(tmp_path / "c.json")
    back = RunConfig.from_json(tmp_path / "c.json")
    assert back == cfg
    (tmp_path / "bad.json").write_text('{"no_such_key": 1}')
    with pytest.raises(ConfigurationError):
        RunConfig.from_json(tmp_path / "bad.json")


def test_ablation_rows_cover_table():
    rows = ablation_rows()
    assert len(rows) == 4
    assert {(r["use_ope"], r["use_history"]) for r in rows} == {
        (False, False), (True, False), (False, True), (True, True)
    }


# --- optimizer -----------------------------------------------------------------


def test_adam_descends_quadratic():
    from elevmap.autodiff import Tensor

    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(200):
        loss = (x * x).sum()
        x.grad = None
        loss.backward()
        opt.step()
    assert np.abs(x.data).max() < 0.1


# --- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_dataset):
    model = ElevationNet(TINY, tiny_dataset.rig)
    opt = Adam(model.params, 1e-3)
    save_checkpoint(tmp_path / "c.npz", model, opt, step=5, frame_idx=2)
    cfg, state, meta, arrays = load_checkpoint(tmp_path / "c.npz", TINY)
    assert meta["step"] == 5 and meta["frame_idx"] == 2
    assert cfg == TINY
    other = ElevationNet(TINY, tiny_dataset.rig)
    other.load_state_dict(state)
    for k in model.params:
        np.testing.assert_array_equal(model.params[k].data, other.params[k].data)


def test_checkpoint_fingerprint_mismatch_is_hard_error(tmp_path, tiny_dataset):
    model = ElevationNet(TINY, tiny_dataset.rig)
    save_checkpoint(tmp_path / "c.npz", model)
    with pytest.raises(ConfigurationError, match="fingerprint"):
        load_checkpoint(tmp_path / "c.npz", TINY.replace(query_channels=8))


# --- training --------------------------------------------------------------------


def test_train_writes_log_and_checkpoints(tmp_path, tiny_dataset):
    res = train(TINY, tiny_dataset, tmp_path / "run")
    assert res.steps == 6
    assert res.checkpoint_path.exists()
    assert (tmp_path / "run" / "ckpt_000003.npz").exists()
    lines = [json.loads(l) for l in open(res.log_path)]
    assert len(lines) == 6
    assert all(np.isfinite(l["total"]) for l in lines)
    for key in ("recons", "grad", "tc", "tv"):
        assert key in lines[0]


def test_train_pinned_first_step_loss(tmp_path, tiny_dataset):
    cfg = TINY.replace(train_steps=1, checkpoint_every=0)
    res = train(cfg, tiny_dataset, tmp_path / "run")
    assert res.loss_history[0]["total"] == pytest.approx(0.2776924683307406, abs=1e-9)


def test_train_deterministic(tmp_path, tiny_dataset):
    r1 = train(TINY, tiny_dataset, tmp_path / "a")
    r2 = train(TINY, tiny_dataset, tmp_path / "b")
    assert [l["total"] for l in r1.loss_history] == [l["total"] for l in r2.loss_history]


def test_train_resume_bit_exact(tmp_path, tiny_dataset):
    full = train(TINY, tiny_dataset, tmp_path / "full")
    resumed = train(
        TINY, tiny_dataset, tmp_path / "resumed",
        resume_from=tmp_path / "full" / "ckpt_000003.npz",
    )
    full_tail = [l["total"] for l in full.loss_history[3:]]
    resumed_tail = [l["total"] for l in resumed.loss_history]
    assert full_tail == resumed_tail  # bit-exact, not approx

    _, state_a, _, _ = load_checkpoint(full.checkpoint_path)
    _, state_b, _, _ = load_checkpoint(resumed.checkpoint_path)
    for k in state_a:
        np.testing.assert_array_equal(state_a[k], state_b[k])


def test_train_empty_dataset_rejected(tmp_path, tiny_dataset):
    import dataclasses

    empty = dataclasses.replace(tiny_dataset, samples=[])
    with pytest.raises(ConfigurationError):
        train(TINY, empty, tmp_path / "run")


def test_train_nan_aborts_with_dump(tmp_path, tiny_dataset, monkeypatch):
    # poison the initializer so the first forward produces non-finite output
    cfg = TINY.replace(param_seed=1234)
    real_init = ElevationNet._build_params

    def poisoned(self):
        real_init(self)
        self.params["head.conv0.w"].data[:] = np.inf

    monkeypatch.setattr(ElevationNet, "_build_params", poisoned)
    with pytest.raises(TrainingError, match="non-finite"):
        train(cfg, tiny_dataset, tmp_path / "run")
    dump = json.load(open(tmp_path / "run" / "nan_dump.json"))
    assert dump["step"] == 0 and "breakdown" in dump


def test_temporal_path_isolation(tiny_dataset):
    # with history off and lambda 0, the loop's gradients equal those of a
    # plain per-frame model with no temporal machinery at all
    cfg = TINY.replace(use_history=False, use_tc_loss=False)
    sample = tiny_dataset.samples[0]

    loop_model = ElevationNet(cfg, tiny_dataset.rig)
    weights = LossWeights(mu=cfg.mu_grad, lam=cfg.effective_lambda_tc, gamma=cfg.gamma_tv)
    frame_gradient(loop_model, sample, None, weights, cfg.smooth_l1_beta)

    plain_model = ElevationNet(cfg, tiny_dataset.rig)
    pred = plain_model.forward(sample.images, sample.pose)
    total, _ = loss_total(pred, sample.gt_map.values, None, None,
                          LossWeights(mu=cfg.mu_grad, lam=0.0, gamma=cfg.gamma_tv))
    plain_model.zero_grad()
    total.backward()

    for k in loop_model.params:
        np.testing.assert_array_equal(loop_model.params[k].grad, plain_model.params[k].grad)


# --- evaluation -------------------------------------------------------------------


def test_evaluate_gt_as_pred_is_perfect(tiny_dataset):
    report = evaluate(TINY, tiny_dataset, gt_as_pred=True)
    assert all(v == 0.0 for v in report.mae_bands.values())
    assert report.sdr == 0.0
    assert report.mtc < 0.05
    assert report.frames == len(tiny_dataset)


def test_evaluate_deterministic(tmp_path, tiny_dataset):
    res = train(TINY.replace(train_steps=2, checkpoint_every=0), tiny_dataset, tmp_path / "run")
    cfg = TINY.replace(train_steps=2, checkpoint_every=0)
    a = evaluate(cfg, tiny_dataset, checkpoint=res.checkpoint_path)
    b = evaluate(cfg, tiny_dataset, checkpoint=res.checkpoint_path)
    assert a == b
    assert a.fingerprint == cfg.fingerprint()


def test_evaluate_checkpoint_fingerprint_checked(tmp_path, tiny_dataset):
    res = train(TINY.replace(train_steps=1, checkpoint_every=0), tiny_dataset, tmp_path / "run")
    with pytest.raises(ConfigurationError, match="fingerprint"):
        evaluate(TINY.replace(decoder_width=4), tiny_dataset, checkpoint=res.checkpoint_path)


def test_evaluate_frame_filter(tiny_dataset):
    report = evaluate(TINY, tiny_dataset, gt_as_pred=True, frame_filter=lambda k, s: k >= 2)
    assert report.frames == len(tiny_dataset) - 2
    with pytest.raises(ConfigurationError, match="no frames"):
        evaluate(TINY, tiny_dataset, gt_as_pred=True, frame_filter=lambda k, s: False)


def test_evaluate_frustum_restriction(tiny_dataset):
    full = evaluate(TINY, tiny_dataset, gt_as_pred=True, frustum="none")
    front = evaluate(TINY, tiny_dataset, gt_as_pred=True, frustum="front")
    assert front.extras["frustum"] == "front"
    assert all(v == 0.0 for v in front.mae_bands.values())
    assert full.frames == front.frames
