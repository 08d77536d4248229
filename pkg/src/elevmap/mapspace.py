"""Map-view grid conventions, elevation maps, and ego-motion alignment.

Frame conventions used throughout the package:

    world frame      x/y horizontal, z up (gravity axis).
    gravity-aligned  vehicle-centered, z up, x along the vehicle heading
    vehicle frame    projected to horizontal, y to the vehicle's left.
                     Yaw is retained, roll/pitch removed. Elevation maps
                     live in this frame.
    body frame       the full vehicle orientation (roll/pitch applied).

Grid convention: the vehicle anchor cell is (row 0, col cols//2). Cell
(i, j) has its center at forward distance i*resolution and lateral offset
(j - cols//2)*resolution to the left. Row index grows with forward
distance, column index grows to the left. Map values are heights in
meters relative to the vehicle's own ground height, so the anchor cell
of any freshly produced map is exactly zero.

Serialization: an elevation map is a JSON header (``<prefix>.json``) plus
a raw little-endian float32 row-major payload (``<prefix>.bin``). A
partial validity mask, when present, is a sidecar uint8 payload
(``<prefix>.mask.bin``). Round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetError
from .ioutil import atomic_write_bytes, atomic_write_text

__all__ = [
    "GridSpec",
    "VehiclePose",
    "ElevationMap",
    "OverlapMask",
    "relative_se2z",
    "align_previous",
    "masked_history",
    "save_elevation_map",
    "load_elevation_map",
]


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class GridSpec:
    """Prediction-area grid: rows x cols cells of size resolution_m.

    Constructed from cell counts; the metric extent is derived so that
    rows*resolution_m == height_m holds exactly.
    """

    rows: int
    cols: int
    resolution_m: float

    def __post_init__(self):
        if self.resolution_m <= 0:
            raise ConfigurationError(f"resolution_m must be > 0, got {self.resolution_m}")
        if self.rows < 2 or self.cols < 2:
            raise ConfigurationError(f"grid needs at least 2x2 cells, got {self.rows}x{self.cols}")

    @classmethod
    def from_extent(cls, height_m: float, width_m: float, resolution_m: float) -> "GridSpec":
        rows = height_m / resolution_m
        cols = width_m / resolution_m
        if abs(rows - round(rows)) > 1e-9 or abs(cols - round(cols)) > 1e-9:
            raise ConfigurationError(
                f"extent {height_m}x{width_m} m is not a whole number of {resolution_m} m cells"
            )
        return cls(int(round(rows)), int(round(cols)), resolution_m)

    @property
    def height_m(self) -> float:
        return self.rows * self.resolution_m

    @property
    def width_m(self) -> float:
        return self.cols * self.resolution_m

    @property
    def anchor(self) -> tuple[int, int]:
        """Vehicle cell: bottom row, middle column."""
        return (0, self.cols // 2)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(forward, left) coordinates of every cell center, each rows x cols."""
        r = self.resolution_m
        fwd = np.arange(self.rows, dtype=np.float64) * r
        left = (np.arange(self.cols, dtype=np.float64) - self.cols // 2) * r
        return np.meshgrid(fwd, left, indexing="ij")

    def footprint(self) -> tuple[float, float, float, float]:
        """(fwd_min, fwd_max, left_min, left_max) of the covered area."""
        r = self.resolution_m
        c0 = self.cols // 2
        return (
            -0.5 * r,
            (self.rows - 0.5) * r,
            (0 - c0 - 0.5) * r,
            (self.cols - 1 - c0 + 0.5) * r,
        )


@dataclass(frozen=True)
class VehiclePose:
    """World position plus orientation split into yaw and roll/pitch.

    The gravity rotation G maps gravity-aligned coordinates to body
    coordinates: v_body = G @ v_gravity with G = R_pitch @ R_roll, so G
    is the identity on level ground and G^-1 @ v_body removes roll and
    pitch from a body-frame vector.
    """

    position: np.ndarray  # (3,) meters, world frame; z is the ground height
    yaw: float
    roll: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "position", pos)
        if not np.all(np.isfinite(pos)):
            raise ConfigurationError("pose position must be finite")
        if not (abs(self.roll) < math.pi / 2 and abs(self.pitch) < math.pi / 2):
            raise ConfigurationError(
                f"roll/pitch must lie in (-pi/2, pi/2), got roll={self.roll}, pitch={self.pitch}"
            )
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def gravity_matrix(self) -> np.ndarray:
        """G = R_pitch @ R_roll (identity when roll = pitch = 0)."""
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        r_roll = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]], dtype=np.float64)
        r_pitch = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]], dtype=np.float64)
        return r_pitch @ r_roll

    def yaw_matrix2d(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]], dtype=np.float64)


@dataclass
class ElevationMap:
    """Gravity-aligned 2.5D height grid relative to the vehicle ground height."""

    grid: GridSpec
    values: np.ndarray  # rows x cols, meters
    frame_pose: VehiclePose
    timestamp: float = 0.0
    valid_mask: np.ndarray = field(default=None)  # rows x cols bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.rows, self.grid.cols):
            raise ConfigurationError(
                f"values shape {self.values.shape} does not match grid "
                f"{(self.grid.rows, self.grid.cols)}"
            )
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.values.shape:
                raise ConfigurationError("valid_mask shape does not match values")
        if not np.all(np.isfinite(self.values[self.valid_mask])):
            raise ConfigurationError("elevation values must be finite on valid cells")


@dataclass(frozen=True)
class OverlapMask:
    """Cells of the current prediction area covered by the previous one."""

    grid: GridSpec
    mask: np.ndarray  # rows x cols bool

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", m)
        if m.shape != (self.grid.rows, self.grid.cols):
            raise ConfigurationError("overlap mask shape does not match grid")

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def relative_se2z(prev: VehiclePose, curr: VehiclePose) -> tuple[float, float, float, float]:
    """Planar transform + height offset between two gravity-aligned frames.

    Returns (dx, dy, dyaw, dz) taking a point expressed in the *current*
    frame into the *previous* frame:

        p_prev = R(dyaw) @ p_curr + (dx, dy)

    dz = prev ground height - current ground height; it is the value to
    add to the previous map's elevations when re-referencing them to the
    current vehicle (each map is zero at its own vehicle cell).
    """
    dyaw = wrap_angle(curr.yaw - prev.yaw)
    c, s = math.cos(prev.yaw), math.sin(prev.yaw)
    tx = curr.position[0] - prev.position[0]
    ty = curr.position[1] - prev.position[1]
    # rotate world displacement into prev's gravity-aligned frame
    dx = c * tx + s * ty
    dy = -s * tx + c * ty
    dz = prev.position[2] - curr.position[2]
    return (dx, dy, dyaw, dz)


def _bilinear(values: np.ndarray, row_f: np.ndarray, col_f: np.ndarray) -> np.ndarray:
    """Sample a 2D array at fractional (row, col) positions, clamped to the edge."""
    rows, cols = values.shape
    r = np.clip(row_f, 0.0, rows - 1.0)
    c = np.clip(col_f, 0.0, cols - 1.0)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    fr = r - r0
    fc = c - c0
    v00 = values[r0, c0]
    v01 = values[r0, c1]
    v10 = values[r1, c0]
    v11 = values[r1, c1]
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


def align_previous(prev_map: ElevationMap, curr_pose: VehiclePose) -> tuple[ElevationMap, OverlapMask]:
    """Resample the previous prediction into the current vehicle frame.

    Every current-frame cell center is mapped into the previous frame;
    in-footprint cells get a bilinearly interpolated elevation plus the
    dz re-reference, out-of-footprint cells get value 0 and mask False.
    """
    grid = prev_map.grid
    dx, dy, dyaw, dz = relative_se2z(prev_map.frame_pose, curr_pose)

    fwd, left = grid.cell_centers()
    c, s = math.cos(dyaw), math.sin(dyaw)
    prev_f = c * fwd - s * left + dx
    prev_l = s * fwd + c * left + dy

    f_min, f_max, l_min, l_max = grid.footprint()
    inside = (prev_f >= f_min) & (prev_f <= f_max) & (prev_l >= l_min) & (prev_l <= l_max)

    r = grid.resolution_m
    row_f = prev_f / r
    col_f = prev_l / r + grid.cols // 2
    sampled = _bilinear(prev_map.values, row_f, col_f) + dz

    values = np.where(inside, sampled, 0.0)
    mask = OverlapMask(grid, inside)
    aligned = ElevationMap(
        grid=grid,
        values=values,
        frame_pose=curr_pose,
        timestamp=prev_map.timestamp,
        valid_mask=inside.copy(),
    )
    return aligned, mask


def masked_history(prev_aligned: ElevationMap, mask: OverlapMask) -> np.ndarray:
    """Elementwise product of aligned values and the overlap mask."""
    if prev_aligned.values.shape != mask.mask.shape:
        raise ConfigurationError("aligned map and overlap mask shapes differ")
    return prev_aligned.values * mask.mask


# --- serialization ---------------------------------------------------------

_HEADER_VERSION = 1


def save_elevation_map(m: ElevationMap, prefix: str | Path) -> None:
    """Write ``<prefix>.json`` + ``<prefix>.bin`` (little-endian float32)."""
    prefix = Path(prefix)
    all_valid = bool(m.valid_mask.all())
    header = {
        "version": _HEADER_VERSION,
        "rows": m.grid.rows,
        "cols": m.grid.cols,
        "resolution_m": m.grid.resolution_m,
        "timestamp": m.timestamp,
        "pose": {
            "position": [float(v) for v in m.frame_pose.position],
            "yaw": m.frame_pose.yaw,
            "roll": m.frame_pose.roll,
            "pitch": m.frame_pose.pitch,
        },
        "byte_order": "little",
        "dtype": "float32",
        "mask": "all_true" if all_valid else "sidecar",
    }
    atomic_write_text(prefix.with_suffix(".json"), json.dumps(header, indent=2) + "\n")
    atomic_write_bytes(prefix.with_suffix(".bin"), np.ascontiguousarray(m.values, dtype="<f4").tobytes())
    if not all_valid:
        atomic_write_bytes(str(prefix) + ".mask.bin", np.ascontiguousarray(m.valid_mask, dtype=np.uint8).tobytes())


def load_elevation_map(prefix: str | Path, context: str = "") -> ElevationMap:
    """Read a map written by :func:`save_elevation_map`."""
    prefix = Path(prefix)
    where = f"{context}: " if context else ""
    try:
        with open(prefix.with_suffix(".json")) as f:
            header = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"{where}missing map header {prefix.with_suffix('.json')}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"{where}malformed map header {prefix.with_suffix('.json')}: {e}")

    try:
        rows, cols = int(header["rows"]), int(header["cols"])
        grid = GridSpec(rows, cols, float(header["resolution_m"]))
        p = header["pose"]
        pose = VehiclePose(
            position=np.array(p["position"], dtype=np.float64),
            yaw=float(p["yaw"]),
            roll=float(p["roll"]),
            pitch=float(p["pitch"]),
        )
    except (KeyError, TypeError) as e:
        raise DatasetError(f"{where}map header {prefix.with_suffix('.json')} missing field: {e}")

    bin_path = prefix.with_suffix(".bin")
    try:
        payload = bin_path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"{where}missing map payload {bin_path}")
    expected = rows * cols * 4
    if len(payload) != expected:
        raise DatasetError(
            f"{where}truncated map payload {bin_path}: {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)

    valid = None
    if header.get("mask") == "sidecar":
        mask_path = Path(str(prefix) + ".mask.bin")
        try:
            mask_payload = mask_path.read_bytes()
        except FileNotFoundError:
            raise DatasetError(f"{where}missing mask payload {mask_path}")
        if len(mask_payload) != rows * cols:
            raise DatasetError(f"{where}truncated mask payload {mask_path}")
        valid = np.frombuffer(mask_payload, dtype=np.uint8).reshape(rows, cols).astype(bool)

    return ElevationMap(
        grid=grid,
        values=values,
        frame_pose=pose,
        timestamp=float(header.get("timestamp", 0.0)),
        valid_mask=valid,
    )
