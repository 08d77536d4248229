"""Metric oracles: banded MAE counting, exhaustive-pair SDR, mTC, frustum geometry."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elevmap.camera import CameraExtrinsics, default_rig
from elevmap.errors import ConfigurationError
from elevmap.evalkit import EvalReport, default_bands, frustum_mask, mae_banded, mtc, sdr
from elevmap.mapspace import ElevationMap, GridSpec, VehiclePose

GRID = GridSpec(100, 100, 1.0)


def pose_at(x=0.0, y=0.0, z=0.0, yaw=0.0):
    return VehiclePose(np.array([x, y, z]), yaw=yaw)


# --- banded MAE ----------------------------------------------------------------


def test_mae_zero_and_uniform():
    gt = np.random.default_rng(0).normal(size=(100, 100))
    zero = mae_banded(gt, gt, GRID)
    assert all(v == 0.0 for v in zero.values())
    ones = mae_banded(gt + 1.0, gt, GRID)
    for v in ones.values():
        assert v == pytest.approx(1.0, abs=1e-12)


def test_mae_band_counting_oracle():
    gt = np.zeros((100, 100))
    pred = np.zeros((100, 100))
    pred[50:] = 1.0  # 1 m error only beyond 50 m forward
    out = mae_banded(pred, gt, GRID)
    assert out[(0.0, 25.0)] == 0.0
    assert out[(0.0, 50.0)] == 0.0
    assert out[(0.0, 100.0)] == pytest.approx(0.5)


def test_mae_band_nesting_consistency():
    rng = np.random.default_rng(1)
    pred, gt = rng.normal(size=(100, 100)), rng.normal(size=(100, 100))
    out = mae_banded(pred, gt, GRID)
    seg = mae_banded(pred, gt, GRID, bands=[(50.0, 100.0)])[(50.0, 100.0)]
    half = out[(0.0, 50.0)]
    full = out[(0.0, 100.0)]
    assert min(half, seg) <= full <= max(half, seg)
    # exact weighted decomposition: both halves have 50 rows each
    assert full == pytest.approx(0.5 * half + 0.5 * seg, abs=1e-12)


def test_mae_default_bands_scale_with_grid():
    g = GridSpec(32, 32, 1.0)
    assert default_bands(g) == ((0.0, 8.0), (0.0, 16.0), (0.0, 32.0))


# --- SDR -----------------------------------------------------------------------


def _sdr_exhaustive(pred, gt, tau=0.1, eps=1e-6):
    """Independent all-ordered-pairs oracle."""

    def norm(v):
        lo, hi = v.min(), v.max()
        return np.full_like(v, 0.5) if hi == lo else (v - lo) / (hi - lo)

    def labels(v):
        r = v[:, None] / np.maximum(v[None, :], eps)
        return np.where(r > 1 + tau, 1, np.where(r < 1 - tau, -1, 0))

    p, g = norm(np.asarray(pred, float)).ravel(), norm(np.asarray(gt, float)).ravel()
    lp, lg = labels(p), labels(g)
    off = ~np.eye(p.size, dtype=bool)
    return float((lp != lg)[off].mean())


def test_sdr_zero_on_equal_maps():
    m = np.random.default_rng(2).random((16, 16))
    for seed in range(5):
        assert sdr(m, m, n=100, rng=seed) == 0.0


def test_sdr_inverted_geometric_ramp_is_one():
    # gt with every pairwise ordinal decisive (all values clear the ratio
    # guard and consecutive ratios exceed 1 + tau); pred strictly anti-monotone
    v = np.concatenate([[0.0], 1.2 ** -np.arange(62, -1.0, -1.0)])
    gt = v.reshape(8, 8)
    pred = 1.0 - gt
    assert _sdr_exhaustive(pred, gt) == 1.0
    assert sdr(pred, gt, n=500, rng=0) == 1.0


def test_sdr_sampled_within_binomial_bound_of_exhaustive():
    rng = np.random.default_rng(3)
    n = 1000
    for _ in range(6):
        pred = rng.random((16, 16))
        gt = rng.random((16, 16))
        exact = _sdr_exhaustive(pred, gt)
        sample = sdr(pred, gt, n=n, rng=rng)
        sigma = math.sqrt(max(exact * (1 - exact), 1e-9) / n)
        assert abs(sample - exact) <= 3 * sigma + 1e-9


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.1, 50.0), b=st.floats(-20.0, 20.0))
def test_sdr_affine_invariance(a, b):
    rng = np.random.default_rng(4)
    pred, gt = rng.random((12, 12)), rng.random((12, 12))
    assert sdr(pred, gt, n=200, rng=7) == sdr(a * pred + b, a * gt + b, n=200, rng=7)


def test_sdr_constant_maps_agree():
    # both constant: normalization pins them at 0.5, so no disagreement
    assert sdr(np.full((8, 8), 3.0), np.full((8, 8), -1.0), n=50, rng=0) == 0.0


def test_sdr_deterministic_and_validated():
    m = np.random.default_rng(5).random((8, 8))
    o = m[::-1].copy()
    assert sdr(m, o, n=100, rng=42) == sdr(m, o, n=100, rng=42)
    with pytest.raises(ConfigurationError):
        sdr(m, o, n=0)


# --- mTC -----------------------------------------------------------------------


def test_mtc_static_identical():
    m = np.random.default_rng(6).normal(size=(20, 20))
    grid = GridSpec(20, 20, 1.0)
    maps = [ElevationMap(grid, m, pose_at(), timestamp=k) for k in range(4)]
    assert mtc(maps) == pytest.approx(0.0, abs=1e-12)


def test_mtc_constant_maps_forward_motion():
    grid = GridSpec(20, 20, 1.0)
    maps = [
        ElevationMap(grid, np.full((20, 20), 2.0), pose_at(x=3.0 * k), timestamp=k)
        for k in range(4)
    ]
    assert mtc(maps) == pytest.approx(0.0, abs=1e-12)


def test_mtc_two_frame_constant_disagreement():
    grid = GridSpec(20, 20, 1.0)
    a = ElevationMap(grid, np.zeros((20, 20)), pose_at())
    b = ElevationMap(grid, np.full((20, 20), 0.3), pose_at(x=5.0))
    assert mtc([a, b]) == pytest.approx(0.3, abs=1e-12)


def test_mtc_needs_two_frames():
    grid = GridSpec(20, 20, 1.0)
    with pytest.raises(ConfigurationError):
        mtc([ElevationMap(grid, np.zeros((20, 20)), pose_at())])


# --- frustum masking -------------------------------------------------------------


def test_frustum_three_cameras_cover_forward():
    rig = default_rig(64)
    mask = frustum_mask(rig, pose_at(), GridSpec(32, 32, 1.0))
    # full rig covers the whole forward half-plane beyond the first row
    assert mask[1:].all()


def test_frustum_front_camera_wedge():
    rig = default_rig(64)
    intr = rig[0][0]
    alpha = math.atan(intr.cx / intr.fx)
    grid = GridSpec(32, 32, 1.0)
    mask = frustum_mask([rig[0]], pose_at(), grid)
    fwd, left = grid.cell_centers()
    angle = np.arctan2(np.abs(left), fwd)
    margin = np.arctan2(0.9 * grid.resolution_m, np.maximum(np.hypot(fwd, left), 1.0))
    inside = angle < alpha - margin
    outside = angle > alpha + margin
    assert mask[inside & (fwd > 0)].all()
    assert not mask[outside].any()


def test_frustum_backward_camera_sees_nothing():
    rig = default_rig(64)
    intr, extr = rig[0]
    c, s = math.cos(math.pi), math.sin(math.pi)
    rot_z_pi = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    backward = (intr, CameraExtrinsics(rotation=extr.rotation @ rot_z_pi))
    mask = frustum_mask([backward], pose_at(), GridSpec(16, 16, 1.0))
    assert not mask[1:].any()


def test_frustum_uses_cell_heights():
    rig = default_rig(64)
    grid = GridSpec(16, 16, 1.0)
    flat = frustum_mask([rig[0]], pose_at(), grid)
    heights = np.zeros((16, 16))
    heights[8:, :] = 60.0  # lift distant cells far above the frustum
    lifted = frustum_mask([rig[0]], pose_at(), grid, heights=heights)
    assert flat.sum() > lifted.sum()


# --- report --------------------------------------------------------------------


def test_report_round_trip(tmp_path):
    rep = EvalReport(
        mae_bands={"0-8m": 0.2, "0-16m": 0.3, "0-32m": 0.5},
        sdr=0.12, mtc=0.05, frames=10, fingerprint="abc123",
    )
    rep.to_json(tmp_path / "r.json")
    back = EvalReport.from_json(tmp_path / "r.json")
    assert back == rep
    table = rep.render_table()
    assert "0-32m" in table and "abc123" in table
