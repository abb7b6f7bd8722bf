"""Object-centred spherical cameras.

Convention: ``theta`` is the polar angle from world +z, ``phi`` the azimuth
from +x in the xy-plane, world up is +z. Cameras sit on a sphere around the
origin and always look at it. Camera axes follow OpenGL (x right, y up,
looking down -z); pixel rows grow downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

POLE_EPS = 1e-4
TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class SphericalPose:
    theta: float
    phi: float
    radius: float

    def __post_init__(self):
        theta, phi, radius = float(self.theta), float(self.phi), float(self.radius)
        if not all(map(math.isfinite, (theta, phi, radius))):
            raise InvalidArgumentError(f"non-finite pose {(theta, phi, radius)}")
        if radius <= 0:
            raise InvalidArgumentError(f"radius must be positive, got {radius}")
        object.__setattr__(self, "theta", min(max(theta, POLE_EPS), math.pi - POLE_EPS))
        phi = phi % TWO_PI
        object.__setattr__(self, "phi", 0.0 if phi == TWO_PI else phi)
        object.__setattr__(self, "radius", radius)

    @property
    def center(self) -> np.ndarray:
        st = math.sin(self.theta)
        return self.radius * np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])

    def as_dict(self) -> dict:
        return {"theta": self.theta, "phi": self.phi, "radius": self.radius}


@dataclass(frozen=True)
class RelativePose:
    d_theta: float
    d_phi: float
    d_radius: float

    def __post_init__(self):
        object.__setattr__(self, "d_phi", wrap_angle(float(self.d_phi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.d_theta, self.d_phi, self.d_radius])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with square pixels and the principal point at the image centre.

    Pixel ``(row i, col j)`` has its centre at ``(j + 0.5, i + 0.5)``.
    """

    width: int
    height: int
    focal: float
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height or self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"image size must be positive integers, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.focal > 0 and math.isfinite(self.focal)):
            raise InvalidArgumentError(f"focal must be positive, got {self.focal}")
        if not (0 < self.near < self.far):
            raise InvalidArgumentError(f"need 0 < near < far, got near={self.near} far={self.far}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x_world = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def relative_pose(a: SphericalPose, b: SphericalPose) -> RelativePose:
    return RelativePose(b.theta - a.theta, b.phi - a.phi, b.radius - a.radius)


def apply_relative(a: SphericalPose, d: RelativePose) -> SphericalPose:
    radius = a.radius + d.d_radius
    if not radius > 0:
        raise InvalidArgumentError(f"relative change gives non-positive radius {radius}")
    return SphericalPose(a.theta + d.d_theta, a.phi + d.d_phi, radius)


def to_world_from_camera(pose: SphericalPose) -> RigidTransform:
    """Camera-to-world transform; columns of the rotation are the camera x, y, z axes."""
    center = pose.center
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    up = up - np.dot(up, forward) * forward
    up /= np.linalg.norm(up)
    right = np.cross(forward, up)
    return RigidTransform(np.column_stack([right, up, -forward]), center)


def view_matrix(pose: SphericalPose) -> tuple[np.ndarray, np.ndarray]:
    """World-to-view rotation (rows: right, down, forward) and camera centre.

    View coordinates ``(a, b, z) = V (p - c)`` put depth ``z`` along the look
    direction and ``b`` along image rows, so ``u = cx + f a / z``.
    """
    rig = to_world_from_camera(pose)
    r = rig.rotation
    return np.stack([r[:, 0], -r[:, 1], -r[:, 2]]), rig.translation


def project_points(points, pose: SphericalPose, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (u, v) and depth of world points."""
    v, c = view_matrix(pose)
    xv = (np.asarray(points, dtype=np.float64) - c) @ v.T
    z = xv[..., 2]
    uv = np.stack([intrinsics.cx + intrinsics.focal * xv[..., 0] / z,
                   intrinsics.cy + intrinsics.focal * xv[..., 1] / z], axis=-1)
    return uv, z


def matrix_rig(num_views: int, elevation: float, radius: float) -> list[SphericalPose]:
    """``num_views`` cameras evenly spaced in azimuth at a fixed elevation above the equator."""
    if num_views < 1:
        raise InvalidArgumentError("num_views must be >= 1")
    theta = math.pi / 2 - elevation
    return [SphericalPose(theta, TWO_PI * i / num_views, radius) for i in range(num_views)]
