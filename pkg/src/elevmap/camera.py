"""Pinhole camera rig and ray geometry for the positional encoding.

Camera frame: z along the optical axis, x to the right, y down. Image
coordinates are continuous: pixel (row, col) covers [col, col+1) x
[row, row+1), so its center is (col + 0.5, row + 0.5) and the principal
point of a centered S x S camera is (S/2, S/2).

The extrinsic rotation R maps body-frame vectors to camera-frame
vectors. Unprojection composes K^-1 (pixel to camera ray), R^-1 (camera
to body) and G^-1 (body to gravity-aligned, see
:class:`~elevmap.mapspace.VehiclePose`), giving ray directions in the
gravity-aligned vehicle frame. Passing G = I instead yields the
camera-only encoding used as the ablation baseline. Mount translations
are carried for rendering but never enter the direction math.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "CameraIntrinsics",
    "CameraExtrinsics",
    "CameraRig",
    "unproject_direction",
    "unproject_directions",
    "project_to_image",
    "feature_grid_pixels",
    "default_rig",
    "save_rig",
    "load_rig",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if self.image_width < 8 or self.image_height < 8:
            raise ConfigurationError("image dimensions must be at least 8 px")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def inverse_matrix(self) -> np.ndarray:
        # K is upper-triangular with positive diagonal, hence invertible;
        # validated here so a singular rig fails at load time, not per call.
        k = self.matrix()
        if abs(np.linalg.det(k)) < 1e-12:
            raise ConfigurationError("intrinsic matrix is singular")
        return np.linalg.inv(k)


@dataclass(frozen=True)
class CameraExtrinsics:
    """Body-to-camera rotation plus the mount offset in the body frame."""

    rotation: np.ndarray  # 3x3
    mount_translation: np.ndarray = field(default=None)  # (3,) meters

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", r)
        t = self.mount_translation
        t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "mount_translation", t)
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ConfigurationError("extrinsic rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ConfigurationError("extrinsic rotation must be proper (det = +1)")


@dataclass(frozen=True)
class CameraRig:
    """Ordered (front, left, right) list of cameras.

    The order is load-bearing: feature tokens and positional embeddings
    are concatenated front, then left, then right.
    """

    cameras: tuple[tuple[CameraIntrinsics, CameraExtrinsics], ...]

    CAMERA_NAMES = ("front", "left", "right")

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) != 3:
            raise ConfigurationError(f"rig needs exactly 3 cameras, got {len(self.cameras)}")

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]


def unproject_direction(
    cam: tuple[CameraIntrinsics, CameraExtrinsics],
    gravity: np.ndarray,
    pixel: tuple[float, float],
) -> np.ndarray:
    """Unit ray direction in the gravity-aligned frame for one pixel."""
    return unproject_directions(cam, gravity, np.array([pixel], dtype=np.float64))[0]


def unproject_directions(
    cam: tuple[CameraIntrinsics, CameraExtrinsics],
    gravity: np.ndarray,
    pixels: np.ndarray,
) -> np.ndarray:
    """Unit ray directions for an (n, 2) array of (u, v) pixels.

    Directions are L2-normalized so the encoding depends on the ray
    direction only, not on the intrinsic scale.
    """
    intr, extr = cam
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    p = np.linalg.inv(gravity) @ extr.rotation.T @ intr.inverse_matrix()
    homog = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    d = homog @ p.T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def project_to_image(
    cam: tuple[CameraIntrinsics, CameraExtrinsics],
    gravity: np.ndarray,
    point: np.ndarray,
) -> tuple[float, float, bool]:
    """Project a gravity-aligned point: (u, v, in_front).

    Inverse of the direction map (translation-free): applies K @ R @ G
    and perspective-divides. Points at or behind the camera plane report
    in_front = False with non-finite pixel coordinates left unclamped.
    """
    intr, extr = cam
    point = np.asarray(point, dtype=np.float64).reshape(3)
    v_cam = extr.rotation @ (gravity @ point)
    depth = v_cam[2]
    in_front = bool(depth > 0)
    if depth == 0:
        return (math.inf, math.inf, False)
    u = intr.fx * v_cam[0] / depth + intr.cx
    v = intr.fy * v_cam[1] / depth + intr.cy
    return (float(u), float(v), in_front)


def feature_grid_pixels(cam: CameraIntrinsics, feature_rows: int, feature_cols: int) -> np.ndarray:
    """Pixel-space centers of each feature cell, row-major, shape (rows*cols, 2).

    Feature cell (i, j) covers a stride_u x stride_v pixel block; its
    center is (stride_u*(j + 0.5), stride_v*(i + 0.5)).
    """
    if cam.image_width % feature_cols != 0 or cam.image_height % feature_rows != 0:
        raise ConfigurationError(
            f"feature dims {feature_rows}x{feature_cols} do not divide image "
            f"{cam.image_height}x{cam.image_width}"
        )
    stride_u = cam.image_width / feature_cols
    stride_v = cam.image_height / feature_rows
    u = stride_u * (np.arange(feature_cols) + 0.5)
    v = stride_v * (np.arange(feature_rows) + 0.5)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


# --- rig construction and I/O ----------------------------------------------

# Front camera axes in the body frame: optical z = forward, x = right, y = down.
_R_FRONT = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def default_rig(
    image_size: int = 64,
    hfov_deg: float = 70.0,
    side_yaw_deg: float = 55.0,
    mount_height: float = 1.6,
) -> CameraRig:
    """Front/left/right rig with overlapping coverage of the forward half-plane."""
    f = (image_size / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    intr = CameraIntrinsics(
        fx=f, fy=f, cx=image_size / 2.0, cy=image_size / 2.0,
        image_width=image_size, image_height=image_size,
    )
    side = math.radians(side_yaw_deg)
    cams = []
    for yaw_off, lateral in ((0.0, 0.0), (side, 0.35), (-side, -0.35)):
        rot = _R_FRONT @ _rot_z(-yaw_off)
        mount = np.array([0.5, lateral, mount_height])
        cams.append((intr, CameraExtrinsics(rotation=rot, mount_translation=mount)))
    return CameraRig(tuple(cams))


def save_rig(rig: CameraRig, path: str | Path) -> None:
    doc = {"cameras": []}
    for name, (intr, extr) in zip(CameraRig.CAMERA_NAMES, rig):
        doc["cameras"].append(
            {
                "name": name,
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "image_width": intr.image_width,
                "image_height": intr.image_height,
                "rotation_row_major": [float(v) for v in np.asarray(extr.rotation).ravel()],
                "mount_translation": [float(v) for v in extr.mount_translation],
            }
        )
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_rig(path: str | Path) -> CameraRig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read rig file {path}: {e}")
    cams = []
    for entry in doc["cameras"]:
        intr = CameraIntrinsics(
            fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
            image_width=entry["image_width"], image_height=entry["image_height"],
        )
        extr = CameraExtrinsics(
            rotation=np.array(entry["rotation_row_major"], dtype=np.float64).reshape(3, 3),
            mount_translation=np.array(entry["mount_translation"], dtype=np.float64),
        )
        intr.inverse_matrix()  # fail on singular K at load time
        cams.append((intr, extr))
    return CameraRig(tuple(cams))
