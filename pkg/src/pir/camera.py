"""Pinhole camera model: projection, ray casting and intrinsics jitter.

Conventions: right-handed, +z forward in camera space, image origin at the
top-left with u to the right and v downwards.  A pose maps world to camera
coordinates, ``p_c = R p_w + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from pir.errors import BehindCameraError, ConfigError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    u0: float
    v0: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (self.u0 > 0 and self.v0 > 0):
            raise ValueError(f"principal point must be positive, got {self.u0}, {self.v0}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel-edge aligned)."""
        return Intrinsics(self.fx * factor, self.fy * factor, self.u0 * factor, self.v0 * factor)


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation has determinant != +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_from(cls, yaw: float, pitch: float, roll: float, distance: float) -> "Pose":
        """Head rotation (radians) with the camera ``distance`` in front along +z."""
        return cls(rotation_ypr(yaw, pitch, roll), np.array([0.0, 0.0, distance]))


def rotation_ypr(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Rx(pitch) @ Ry(yaw)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


@dataclass(frozen=True)
class Camera:
    K: Intrinsics
    pose: Pose
    near: float = 2.0
    far: float = 3.5

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


def project(p_world, K: Intrinsics, pose: Pose) -> tuple[float, float, float]:
    """World point -> (u, v, z_c)."""
    p_c = pose.R @ np.asarray(p_world, dtype=np.float64) + pose.t
    z = p_c[2]
    if z <= 0:
        raise BehindCameraError(f"point has camera depth {z:.6g} <= 0")
    return K.fx * p_c[0] / z + K.u0, K.fy * p_c[1] / z + K.v0, float(z)


def project_points(points: np.ndarray, K: Intrinsics, pose: Pose) -> np.ndarray:
    """Vectorised ``project`` for points [..., 3] -> [..., 3] of (u, v, z_c)."""
    p_c = points @ pose.R.T + pose.t
    z = p_c[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("some points have non-positive camera depth")
    return np.stack([K.fx * p_c[..., 0] / z + K.u0, K.fy * p_c[..., 1] / z + K.v0, z], axis=-1)


def cast_ray(u: float, v: float, K: Intrinsics, pose: Pose, near: float, far: float) -> Ray:
    if not near < far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    d_cam = np.array([(u - K.u0) / K.fx, (v - K.v0) / K.fy, 1.0])
    d = pose.R.T @ d_cam
    return Ray(pose.center, d / np.linalg.norm(d), near, far)


def pixel_rays(K: Intrinsics, pose: Pose, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins and unit directions through pixel centres, each [H*W, 3]."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    d_cam = np.stack([(u - K.u0) / K.fx, (v - K.v0) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = d_cam @ pose.R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(pose.center, d.shape).copy(), d


def point_at_depth(ray: Ray, z_c: float, pose: Pose) -> np.ndarray:
    """Point on ``ray`` whose camera-space depth is ``z_c``."""
    cos_axis = (pose.R @ ray.direction)[2]
    return ray.origin + (z_c / cos_axis) * ray.direction


def perturb_intrinsics(K: Intrinsics, spread: float, rng: np.random.Generator,
                       draws: tuple[float, float, float] | None = None) -> Intrinsics:
    """Jitter augmentation: scale the focal lengths and shift the principal point.

    One draw (x1, x2, x3) ~ U(-s, s)^3 per call; x1 is shared by both focal
    lengths.  ``draws`` bypasses the generator (for tests and replays).
    With ``spread == 0`` the generator is still advanced by three draws so
    that augmented and plain runs consume identical random streams.
    """
    if spread < 0:
        raise ValueError("spread must be >= 0")
    while True:
        if draws is None:
            x1, x2, x3 = rng.uniform(-1.0, 1.0, size=3) * spread
        else:
            x1, x2, x3 = draws
        fx = K.fx * (1.0 + x1 / (2.0 * K.u0))
        fy = K.fy * (1.0 + x1 / (2.0 * K.v0))
        if fx > 0 and fy > 0 and K.u0 + x2 > 0 and K.v0 + x3 > 0:
            return Intrinsics(fx, fy, K.u0 + x2, K.v0 + x3)
        if draws is not None:
            raise ValueError("perturbation produces invalid intrinsics")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cameras(path, cameras: list[Camera]) -> None:
    """One camera per line: ``fx fy u0 v0 r11..r33 t1 t2 t3 near far``."""
    lines = []
    for cam in cameras:
        vals = [cam.K.fx, cam.K.fy, cam.K.u0, cam.K.v0, *cam.pose.R.reshape(-1), *cam.pose.t,
                cam.near, cam.far]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[Camera]:
    cameras = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 18:
            raise ConfigError(f"{path}:{lineno}: expected 18 numbers, got {len(vals)}")
        cameras.append(Camera(Intrinsics(*vals[:4]),
                              Pose(np.array(vals[4:13]).reshape(3, 3), np.array(vals[13:16])),
                              vals[16], vals[17]))
    return cameras


def with_intrinsics(cam: Camera, K: Intrinsics) -> Camera:
    return replace(cam, K=K)
