"""Evaluation metrics for elevation map predictions.

MAE is reported over nested forward-range bands (cell membership by
row-center forward distance). SDR samples cell pairs and counts ordinal
relation flips between min-max normalized maps. mTC averages the masked
L1 discrepancy between consecutive ego-aligned predictions. The frustum
mask restricts evaluation to cells visible from a chosen camera subset,
which keeps single-camera comparisons fair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraRig, project_to_image
from .errors import ConfigurationError
from .mapspace import ElevationMap, GridSpec, VehiclePose, align_previous
from .objective import loss_tc

__all__ = [
    "EvalReport",
    "default_bands",
    "mae_banded",
    "sdr",
    "mtc",
    "frustum_mask",
]

_SDR_EPS = 1e-6


def default_bands(grid: GridSpec) -> tuple[tuple[float, float], ...]:
    """Quarter, half and full forward range (the full-scale analog is 25/50/100 m)."""
    h = grid.height_m
    return ((0.0, h / 4), (0.0, h / 2), (0.0, h))


def band_label(band: tuple[float, float]) -> str:
    lo, hi = band
    return f"{lo:g}-{hi:g}m"


def _values_pair(pred, gt):
    p = pred.values if isinstance(pred, ElevationMap) else np.asarray(pred, dtype=np.float64)
    g = gt.values if isinstance(gt, ElevationMap) else np.asarray(gt, dtype=np.float64)
    if isinstance(pred, ElevationMap) and isinstance(gt, ElevationMap) and pred.grid != gt.grid:
        raise ConfigurationError("prediction and ground truth grids differ")
    if p.shape != g.shape:
        raise ConfigurationError(f"map shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def mae_banded(pred, gt, grid: GridSpec | None = None, bands=None, cell_mask: np.ndarray | None = None) -> dict:
    """Mean |pred - gt| per forward-range band; bands are [lo, hi) in meters."""
    if grid is None:
        if not isinstance(pred, ElevationMap):
            raise ConfigurationError("mae_banded needs a grid when given bare arrays")
        grid = pred.grid
    p, g = _values_pair(pred, gt)
    bands = default_bands(grid) if bands is None else tuple(bands)
    fwd = np.arange(grid.rows)[:, None] * grid.resolution_m * np.ones((1, grid.cols))
    err = np.abs(p - g)
    out = {}
    for band in bands:
        lo, hi = band
        sel = (fwd >= lo) & (fwd < hi)
        if cell_mask is not None:
            sel &= cell_mask
        out[band] = float(err[sel].mean()) if sel.any() else float("nan")
    return out


def _normalize01(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi - lo == 0:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def _ord_labels(a: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    ratio = a / np.maximum(b, _SDR_EPS)
    return np.where(ratio > 1 + tau, 1, np.where(ratio < 1 - tau, -1, 0))


def sdr(
    pred,
    gt,
    n: int = 100,
    tau: float = 0.1,
    rng: np.random.Generator | int = 0,
    cell_mask: np.ndarray | None = None,
) -> float:
    """Structural disagreement rate over n sampled cell pairs.

    Both maps are min-max normalized to [0, 1] per map (constant maps
    normalize to all 0.5); the ordinal test compares the guarded ratio
    against 1 +/- tau. Deterministic given the rng seed.
    """
    if n <= 0:
        raise ConfigurationError("sdr needs a positive sample count")
    p, g = _values_pair(pred, gt)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pn = _normalize01(p).ravel()
    gn = _normalize01(g).ravel()
    idx_pool = np.flatnonzero(cell_mask.ravel()) if cell_mask is not None else np.arange(pn.size)
    if idx_pool.size < 2:
        raise ConfigurationError("sdr needs at least 2 eligible cells")
    i = idx_pool[rng.integers(0, idx_pool.size, n)]
    j = idx_pool[rng.integers(0, idx_pool.size, n)]
    # resample collisions so every pair is two distinct cells
    while True:
        dup = i == j
        if not dup.any():
            break
        j[dup] = idx_pool[rng.integers(0, idx_pool.size, int(dup.sum()))]
    disagree = _ord_labels(pn[i], pn[j], tau) != _ord_labels(gn[i], gn[j], tau)
    return float(disagree.mean())


def mtc(maps: list[ElevationMap]) -> float:
    """Mean temporal consistency: masked L1 between consecutive aligned maps."""
    if len(maps) < 2:
        raise ConfigurationError("mtc needs at least 2 frames")
    vals = []
    for prev, curr in zip(maps[:-1], maps[1:]):
        aligned, mask = align_previous(prev, curr.frame_pose)
        vals.append(loss_tc(curr.values, aligned.values, mask))
    return float(np.mean(vals))


def frustum_mask(
    cameras,
    pose: VehiclePose,
    grid: GridSpec,
    heights: np.ndarray | None = None,
) -> np.ndarray:
    """Cells whose center projects into at least one camera with positive depth.

    ``cameras`` is a CameraRig or any iterable of (intrinsics,
    extrinsics) pairs; ``heights`` lifts cell centers to the local
    ground (defaults to the vehicle plane).
    """
    cams = list(cameras.cameras) if isinstance(cameras, CameraRig) else list(cameras)
    fwd, left = grid.cell_centers()
    z = np.zeros_like(fwd) if heights is None else np.asarray(heights, dtype=np.float64)
    gravity = pose.gravity_matrix()
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    for i in range(grid.rows):
        for j in range(grid.cols):
            point = np.array([fwd[i, j], left[i, j], z[i, j]])
            for cam in cams:
                u, v, in_front = project_to_image(cam, gravity, point)
                intr = cam[0]
                if in_front and 0 <= u <= intr.image_width and 0 <= v <= intr.image_height:
                    mask[i, j] = True
                    break
    return mask


@dataclass
class EvalReport:
    """Aggregated metrics for one evaluation run."""

    mae_bands: dict  # band label -> meters
    sdr: float
    mtc: float
    frames: int
    fingerprint: str
    extras: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        doc = {
            "mae_bands": self.mae_bands,
            "sdr": self.sdr,
            "mtc": self.mtc,
            "frames": self.frames,
            "fingerprint": self.fingerprint,
            "extras": self.extras,
        }
        atomic_write_text(path, json.dumps(doc, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        with open(path) as f:
            doc = json.load(f)
        return cls(
            mae_bands=doc["mae_bands"],
            sdr=doc["sdr"],
            mtc=doc["mtc"],
            frames=doc["frames"],
            fingerprint=doc["fingerprint"],
            extras=doc.get("extras", {}),
        )

    def render_table(self) -> str:
        labels = list(self.mae_bands)
        header = "MAE [m]  " + "  ".join(f"{l:>10s}" for l in labels) + f"  {'SDR':>8s}  {'mTC [m]':>8s}"
        row = "         " + "  ".join(f"{self.mae_bands[l]:>10.3f}" for l in labels)
        row += f"  {self.sdr:>8.3f}  {self.mtc:>8.3f}"
        return "\n".join([header, row, f"frames: {self.frames}  config: {self.fingerprint}"])
