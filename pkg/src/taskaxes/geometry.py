"""Shared 3D geometry: vectors, frames, pinhole camera, axis utilities.

All quantities are SI (meters, radians) in a single world frame; the
simulated camera frame coincides with the world frame. Degrees appear
only at file/CLI boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonPositiveDepth, OutOfBounds

UNIT_TOL = 1e-9
WORLD_X = np.array([1.0, 0.0, 0.0])
WORLD_Y = np.array([0.0, 1.0, 0.0])
WORLD_Z = np.array([0.0, 0.0, 1.0])


def norm(v) -> float:
    return float(np.linalg.norm(v))


def unit(v) -> np.ndarray:
    """Normalize a vector, rejecting near-zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ConfigError("cannot normalize a near-zero vector")
    return v / n


def angle_between(a, b) -> float:
    """Angle in [0, pi] between two unit vectors."""
    c = float(np.clip(np.dot(a, b), -1.0, 1.0))
    return math.acos(c)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues map from a rotation vector to a rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = w / theta
    kx = skew(k)
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def euler_xyz_to_matrix(rx, ry, rz) -> np.ndarray:
    """Extrinsic X-Y-Z Euler rotation (radians): Rz @ Ry @ Rx."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rot_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rot_z @ rot_y @ rot_x


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics; pixel (u, v) with u along width, v along height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, data):
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]),
                   float(data["cy"]), int(data["width"]), int(data["height"]))


def deproject_pixel(u, v, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project a pixel with known depth into the camera/world frame.

    Sub-pixel coordinates are allowed; depth is along the optical axis.
    """
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be > 0, got {depth}")
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    return np.array([(u - intr.cx) * depth / intr.fx,
                     (v - intr.cy) * depth / intr.fy,
                     float(depth)])


def project_point(point, intr: CameraIntrinsics):
    """Pinhole projection; returns (u, v, depth). Depth must be positive."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= 0:
        raise NonPositiveDepth(f"point depth must be > 0, got {z}")
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, float(z)


@dataclass
class Frame:
    """Rigid pose: rotation column vectors are the frame axes in world terms."""

    origin: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(self.origin)) or not np.all(np.isfinite(self.rotation)):
            raise ConfigError("frame contains non-finite values")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ConfigError(f"rotation not orthonormal (max deviation {err:.3e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ConfigError("rotation must be right-handed (det = +1)")

    @staticmethod
    def identity() -> "Frame":
        return Frame(np.zeros(3), np.eye(3))

    @classmethod
    def from_rpy_deg(cls, origin, rpy_deg) -> "Frame":
        r, p, y = (math.radians(a) for a in rpy_deg)
        return cls(np.asarray(origin, dtype=np.float64), euler_xyz_to_matrix(r, p, y))

    def apply(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.origin

    def apply_dir(self, d) -> np.ndarray:
        return self.rotation @ np.asarray(d, dtype=np.float64)

    def inverse(self) -> "Frame":
        rt = self.rotation.T
        return Frame(-(rt @ self.origin), rt)

    def compose(self, other: "Frame") -> "Frame":
        return Frame(self.rotation @ other.origin + self.origin,
                     self.rotation @ other.rotation)


def orthonormal_completion(z) -> Frame:
    """Deterministic right-handed frame whose third column equals z.

    Seed vector is world X unless |z . X| > 0.9, in which case world Y;
    the fixed rule makes the output reproducible for regression tests.
    """
    z = np.asarray(z, dtype=np.float64)
    seed = WORLD_X if abs(float(z @ WORLD_X)) <= 0.9 else WORLD_Y
    x = seed - float(seed @ z) * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Frame(np.zeros(3), np.column_stack([x, y, z]))


def rotation_between_axes(a, b) -> np.ndarray:
    """Rotation vector taking unit axis a onto unit axis b (angle in [0, pi]).

    The antiparallel case has no unique axis; a deterministic axis
    orthogonal to a is taken from orthonormal_completion.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = float(np.clip(a @ b, -1.0, 1.0))
    w = np.cross(a, b)
    s = float(np.linalg.norm(w))
    angle = math.atan2(s, c)
    if angle < 1e-12:
        return np.zeros(3)
    if angle > math.pi - 1e-6:
        axis = orthonormal_completion(a).rotation[:, 0]
        return angle * axis
    return (angle / s) * w
