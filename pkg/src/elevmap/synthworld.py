"""Synthetic off-road world: terrain, trajectories, rendering, ground truth.

Terrain is multi-octave value noise on a dense world grid, sampled
bilinearly. Trajectories are smooth heading walks that sit on the
terrain, with roll/pitch derived from the local surface normal under
the heading. Camera views are raymarched against the heightfield with
slope + height + fog shading, so image intensities carry recoverable
elevation cues without any pretense of photorealism. Ground-truth map
crops sample the terrain at cell centers and re-reference heights to
the vehicle cell.

Dataset layout (all little-endian, lossless round trip):

    <dir>/manifest.json        counts, seeds, grid, style, per-frame checksums
    <dir>/rig.json             camera rig
    <dir>/frames/NNNNNN/       front.png left.png right.png pose.json
                               gt_map.json gt_map.bin
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraRig, load_rig, save_rig
from .errors import DatasetError, GenerationError
from .mapspace import (
    ElevationMap,
    GridSpec,
    VehiclePose,
    load_elevation_map,
    save_elevation_map,
)

__all__ = [
    "TerrainField",
    "FrameSample",
    "Dataset",
    "generate_terrain",
    "simulate_trajectory",
    "render_views",
    "crop_gt_map",
    "generate_sequence",
    "write_dataset",
    "read_dataset",
]

STYLES = ("desert_flat", "hilly")

# (wavelength_m, amplitude_m) per octave; hilly has strictly larger variance
_STYLE_OCTAVES = {
    "desert_flat": ((96.0, 0.9), (48.0, 0.45), (24.0, 0.18), (12.0, 0.07)),
    "hilly": ((144.0, 7.0), (72.0, 3.0), (36.0, 1.2), (18.0, 0.45)),
}

_SUN = np.array([0.45, 0.2, 0.87])
_SUN = _SUN / np.linalg.norm(_SUN)


@dataclass
class TerrainField:
    """Dense world-frame heightfield over [0, extent] x [0, extent]."""

    heightfield: np.ndarray  # (ny, nx), meters; heightfield[iy, ix] = h(ix*res, iy*res)
    world_resolution_m: float
    seed: int = 0
    style: str = "hilly"

    @property
    def extent_m(self) -> float:
        return (self.heightfield.shape[1] - 1) * self.world_resolution_m

    def height_at(self, x, y):
        """Bilinear height sample, coordinates clamped to the field."""
        res = self.world_resolution_m
        hf = self.heightfield
        ny, nx = hf.shape
        fx = np.clip(np.asarray(x, dtype=np.float64) / res, 0.0, nx - 1.0)
        fy = np.clip(np.asarray(y, dtype=np.float64) / res, 0.0, ny - 1.0)
        ix0 = np.floor(fx).astype(np.intp)
        iy0 = np.floor(fy).astype(np.intp)
        ix1 = np.minimum(ix0 + 1, nx - 1)
        iy1 = np.minimum(iy0 + 1, ny - 1)
        tx = fx - ix0
        ty = fy - iy0
        top = hf[iy0, ix0] * (1 - tx) + hf[iy0, ix1] * tx
        bot = hf[iy1, ix0] * (1 - tx) + hf[iy1, ix1] * tx
        return top * (1 - ty) + bot * ty

    def normal_at(self, x, y):
        """Upward unit surface normal via central differences."""
        d = self.world_resolution_m
        dhdx = (self.height_at(np.asarray(x) + d, y) - self.height_at(np.asarray(x) - d, y)) / (2 * d)
        dhdy = (self.height_at(x, np.asarray(y) + d) - self.height_at(x, np.asarray(y) - d)) / (2 * d)
        n = np.stack(np.broadcast_arrays(-dhdx, -dhdy, np.ones_like(dhdx)), axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def generate_terrain(
    seed: int,
    style: str = "hilly",
    extent_m: float = 600.0,
    world_resolution_m: float = 1.0,
    amplitude_scale: float = 1.0,
) -> TerrainField:
    """Deterministic multi-octave value-noise heightfield."""
    if style not in STYLES:
        raise GenerationError(f"unknown terrain style {style!r}, expected one of {STYLES}")
    n = int(round(extent_m / world_resolution_m)) + 1
    xs = np.arange(n) * world_resolution_m
    field = np.zeros((n, n))
    for octave, (wavelength, amplitude) in enumerate(_STYLE_OCTAVES[style]):
        rng = np.random.default_rng([seed, octave])
        n_lat = int(math.ceil(extent_m / wavelength)) + 2
        lattice = rng.normal(0.0, 1.0, (n_lat + 1, n_lat + 1))
        u = xs / wavelength
        i0 = np.floor(u).astype(np.intp)
        t = _fade(u - i0)
        i1 = i0 + 1
        # separable quintic-smoothed bilinear blend of lattice values
        v00 = lattice[np.ix_(i0, i0)]
        v01 = lattice[np.ix_(i0, i1)]
        v10 = lattice[np.ix_(i1, i0)]
        v11 = lattice[np.ix_(i1, i1)]
        ty, tx = t[:, None], t[None, :]
        field += amplitude * amplitude_scale * (
            v00 * (1 - ty) * (1 - tx) + v01 * (1 - ty) * tx + v10 * ty * (1 - tx) + v11 * ty * tx
        )
    return TerrainField(field, world_resolution_m, seed=seed, style=style)


def _roll_pitch_from_normal(n_aligned: np.ndarray) -> tuple[float, float]:
    """Roll/pitch of a body whose up-axis matches the given heading-frame normal."""
    nx, ny, nz = n_aligned
    roll = math.atan2(ny, nz)
    pitch = math.atan2(-nx, math.hypot(ny, nz))
    return roll, pitch


def simulate_trajectory(
    terrain: TerrainField,
    seed: int,
    num_frames: int,
    speed_mps: float = 3.0,
    dt_s: float = 0.5,
    margin_m: float = 130.0,
) -> list[VehiclePose]:
    """Smooth heading-walk poses sitting on the terrain surface.

    Headings drift with low-frequency noise and steer back toward the
    terrain center so the path (plus the map footprint margin) stays
    inside the extent.
    """
    if num_frames < 1:
        raise GenerationError("num_frames must be >= 1")
    rng = np.random.default_rng([seed, 7])
    extent = terrain.extent_m
    cx = cy = extent / 2.0
    safe = extent / 2.0 - margin_m
    if safe <= 0:
        raise GenerationError(f"terrain extent {extent} m too small for margin {margin_m} m")

    raw = rng.normal(0.0, 1.0, num_frames + 16)
    kernel = np.hanning(13)
    drift = np.convolve(raw, kernel / kernel.sum(), mode="same")[:num_frames] * 0.5

    x, y = cx, cy
    heading = float(rng.uniform(-math.pi, math.pi))
    poses = []
    for k in range(num_frames):
        d = math.hypot(x - cx, y - cy)
        if d > safe * 0.7:
            target = math.atan2(cy - y, cx - x)
            err = (target - heading + math.pi) % (2 * math.pi) - math.pi
            heading += float(np.clip(err, -0.18, 0.18))
        if not (margin_m * 0.25 <= x <= extent - margin_m * 0.25) or not (
            margin_m * 0.25 <= y <= extent - margin_m * 0.25
        ):
            raise GenerationError(f"trajectory left the terrain extent at frame {k}")

        z = float(terrain.height_at(x, y))
        n_world = terrain.normal_at(x, y)
        c, s = math.cos(-heading), math.sin(-heading)
        n_aligned = np.array(
            [c * n_world[0] - s * n_world[1], s * n_world[0] + c * n_world[1], n_world[2]]
        )
        roll, pitch = _roll_pitch_from_normal(n_aligned)
        poses.append(VehiclePose(position=np.array([x, y, z]), yaw=heading, roll=roll, pitch=pitch))

        heading += float(drift[k]) * dt_s
        x += speed_mps * dt_s * math.cos(heading)
        y += speed_mps * dt_s * math.sin(heading)
    return poses


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def render_views(
    terrain: TerrainField,
    pose: VehiclePose,
    rig: CameraRig,
    max_range_m: float = 350.0,
) -> np.ndarray:
    """Raymarch the three camera views; returns (3, S, S, 3) uint8."""
    size = rig[0][0].image_width
    body_to_world = _rot_z(pose.yaw) @ pose.gravity_matrix().T

    images = np.empty((3, size, size, 3), dtype=np.uint8)
    for ci, (intr, extr) in enumerate(rig):
        origin = pose.position + body_to_world @ extr.mount_translation
        cols, rows = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
        homog = np.stack([cols.ravel(), rows.ravel(), np.ones(size * size)], axis=0)
        d_cam = intr.inverse_matrix() @ homog
        d_world = (body_to_world @ extr.rotation.T @ d_cam).T
        d_world = d_world / np.linalg.norm(d_world, axis=1, keepdims=True)
        images[ci] = _march_and_shade(terrain, origin, d_world, pose, max_range_m).reshape(
            size, size, 3
        )
    return images


def _march_and_shade(
    terrain: TerrainField,
    origin: np.ndarray,
    dirs: np.ndarray,
    pose: VehiclePose,
    max_range: float,
) -> np.ndarray:
    n = len(dirs)
    t = np.full(n, 0.6)
    prev_t = t.copy()
    alive = np.ones(n, dtype=bool)
    hit_lo = np.zeros(n)
    hit_hi = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    ceiling = terrain.heightfield.max() + 1.0

    while alive.any():
        p = origin[None, :] + t[:, None] * dirs
        ground = terrain.height_at(p[:, 0], p[:, 1])
        below = alive & (p[:, 2] < ground)
        hit_lo[below] = prev_t[below]
        hit_hi[below] = t[below]
        hit |= below
        alive &= ~below
        # rays above the terrain ceiling and climbing can only be sky
        escaped = alive & (p[:, 2] > ceiling) & (dirs[:, 2] >= 0)
        alive &= ~escaped
        prev_t = t.copy()
        t = t + np.maximum(0.12, 0.012 * t)
        alive &= t <= max_range

    lo, hi = hit_lo, hit_hi
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        p = origin[None, :] + mid[:, None] * dirs
        below = p[:, 2] < terrain.height_at(p[:, 0], p[:, 1])
        hi = np.where(hit & below, mid, hi)
        lo = np.where(hit & ~below, mid, lo)
    t_hit = 0.5 * (lo + hi)

    color = np.empty((n, 3))
    dz = np.clip(dirs[:, 2], 0.0, 1.0)
    sky = np.stack([0.55 + 0.25 * dz, 0.65 + 0.2 * dz, np.full(n, 0.97)], axis=1)
    color[:] = sky

    if hit.any():
        ph = origin[None, :] + t_hit[:, None] * dirs
        nrm = terrain.normal_at(ph[hit, 0], ph[hit, 1])
        lambert = np.clip(nrm @ _SUN, 0.0, 1.0)
        height_cue = np.clip(0.5 + 0.04 * (terrain.height_at(ph[hit, 0], ph[hit, 1]) - pose.position[2]), 0.0, 1.0)
        ground_col = np.stack(
            [0.30 + 0.45 * lambert, height_cue, 0.18 + 0.25 * lambert], axis=1
        )
        fog = 0.45 * (1.0 - np.exp(-t_hit[hit] / 220.0))[:, None]
        color[hit] = ground_col * (1 - fog) + sky[hit] * fog

    return np.clip(color * 255.0 + 0.5, 0, 255).astype(np.uint8)


def crop_gt_map(terrain: TerrainField, pose: VehiclePose, grid: GridSpec, timestamp: float = 0.0) -> ElevationMap:
    """Sample the terrain on the pose-anchored grid, zero at the vehicle cell."""
    fwd, left = grid.cell_centers()
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    wx = pose.position[0] + c * fwd - s * left
    wy = pose.position[1] + s * fwd + c * left
    extent = terrain.extent_m
    if wx.min() < 0 or wy.min() < 0 or wx.max() > extent or wy.max() > extent:
        raise GenerationError(
            f"map footprint leaves terrain extent (x {wx.min():.1f}..{wx.max():.1f}, "
            f"y {wy.min():.1f}..{wy.max():.1f}, extent {extent:.1f})"
        )
    heights = terrain.height_at(wx, wy)
    values = heights - heights[grid.anchor]
    return ElevationMap(grid=grid, values=values, frame_pose=pose, timestamp=timestamp)


@dataclass
class FrameSample:
    """One supervised timestep: three views, pose, ground-truth map crop."""

    images: np.ndarray  # (3, S, S, 3) uint8, front/left/right
    pose: VehiclePose
    gt_map: ElevationMap
    timestamp: float


def generate_sequence(
    terrain: TerrainField,
    rig: CameraRig,
    grid: GridSpec,
    trajectory_seed: int,
    num_frames: int,
    speed_mps: float = 3.0,
    dt_s: float = 0.5,
) -> list[FrameSample]:
    """Render a full supervised sequence along one simulated trajectory."""
    poses = simulate_trajectory(terrain, trajectory_seed, num_frames, speed_mps, dt_s)
    samples = []
    for k, pose in enumerate(poses):
        ts = k * dt_s
        images = render_views(terrain, pose, rig)
        gt = crop_gt_map(terrain, pose, grid, timestamp=ts)
        # quantize to the float32 storage precision so write/read round-trips exactly
        gt.values = gt.values.astype(np.float32).astype(np.float64)
        samples.append(FrameSample(images=images, pose=pose, gt_map=gt, timestamp=ts))
    return samples


# --- dataset I/O ------------------------------------------------------------

_MANIFEST_VERSION = 1
_FRAME_FILES = ("front.png", "left.png", "right.png", "pose.json", "gt_map.json", "gt_map.bin")


@dataclass
class Dataset:
    directory: Path
    manifest: dict
    rig: CameraRig
    grid: GridSpec
    samples: list[FrameSample]

    def __len__(self):
        return len(self.samples)


def _frame_checksum(frame_dir: Path) -> str:
    h = hashlib.sha256()
    for name in _FRAME_FILES:
        h.update((frame_dir / name).read_bytes())
    return h.hexdigest()


def write_dataset(
    samples: list[FrameSample],
    directory: str | Path,
    rig: CameraRig,
    grid: GridSpec,
    meta: dict | None = None,
) -> None:
    """Write a sequence atomically: build in a temp dir, then rename into place."""
    directory = Path(directory)
    if directory.exists():
        raise DatasetError(f"refusing to overwrite existing dataset at {directory}")
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=directory.name + ".tmp.", dir=directory.parent))
    try:
        save_rig(rig, tmp / "rig.json")
        frames_meta = []
        for k, sample in enumerate(samples):
            frame_rel = f"frames/{k:06d}"
            frame_dir = tmp / frame_rel
            frame_dir.mkdir(parents=True)
            for name, img in zip(("front", "left", "right"), sample.images):
                Image.fromarray(img, "RGB").save(frame_dir / f"{name}.png")
            pose = sample.pose
            with open(frame_dir / "pose.json", "w") as f:
                json.dump(
                    {
                        "position": [float(v) for v in pose.position],
                        "yaw": pose.yaw,
                        "roll": pose.roll,
                        "pitch": pose.pitch,
                        "timestamp": sample.timestamp,
                    },
                    f,
                    indent=2,
                )
                f.write("\n")
            save_elevation_map(sample.gt_map, frame_dir / "gt_map")
            frames_meta.append({"dir": frame_rel, "checksum": _frame_checksum(frame_dir)})
        manifest = {
            "version": _MANIFEST_VERSION,
            "frame_count": len(samples),
            "grid": {"rows": grid.rows, "cols": grid.cols, "resolution_m": grid.resolution_m},
            "image_size": rig[0][0].image_width,
            "rig_file": "rig.json",
            "frames": frames_meta,
        }
        if meta:
            manifest.update(meta)
        with open(tmp / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2)
            f.write("\n")
        os.replace(tmp, directory)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def read_dataset(directory: str | Path) -> Dataset:
    """Load and verify a dataset written by :func:`write_dataset`."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"missing manifest {manifest_path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {manifest_path}: {e}")
    for key in ("frame_count", "grid", "rig_file", "frames"):
        if key not in manifest:
            raise DatasetError(f"malformed manifest {manifest_path}: missing key {key!r}")

    rig = load_rig(directory / manifest["rig_file"])
    g = manifest["grid"]
    grid = GridSpec(int(g["rows"]), int(g["cols"]), float(g["resolution_m"]))

    samples = []
    for k, fm in enumerate(manifest["frames"]):
        frame_dir = directory / fm["dir"]
        for name in _FRAME_FILES:
            if not (frame_dir / name).exists():
                raise DatasetError(f"frame {k}: missing file {frame_dir / name}")
        actual = _frame_checksum(frame_dir)
        if actual != fm["checksum"]:
            raise DatasetError(f"frame {k}: checksum mismatch in {frame_dir}")
        images = np.stack(
            [np.asarray(Image.open(frame_dir / f"{n}.png")) for n in ("front", "left", "right")]
        )
        try:
            with open(frame_dir / "pose.json") as f:
                p = json.load(f)
            pose = VehiclePose(
                position=np.array(p["position"], dtype=np.float64),
                yaw=float(p["yaw"]),
                roll=float(p["roll"]),
                pitch=float(p["pitch"]),
            )
            timestamp = float(p["timestamp"])
        except (json.JSONDecodeError, KeyError) as e:
            raise DatasetError(f"frame {k}: malformed pose.json: {e}")
        gt = load_elevation_map(frame_dir / "gt_map", context=f"frame {k}")
        if gt.grid != grid:
            raise DatasetError(f"frame {k}: map grid {gt.grid} does not match manifest grid {grid}")
        samples.append(FrameSample(images=images, pose=pose, gt_map=gt, timestamp=timestamp))

    if len(samples) != int(manifest["frame_count"]):
        raise DatasetError(
            f"manifest frame_count {manifest['frame_count']} != {len(samples)} frames present"
        )
    return Dataset(directory=directory, manifest=manifest, rig=rig, grid=grid, samples=samples)
