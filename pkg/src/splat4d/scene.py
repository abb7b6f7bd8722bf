"""Gaussian cloud representation and procedurally animated ground-truth scenes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
INIT_OPACITY = 0.1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian3D:
    position: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Structure-of-arrays cloud. Row ``i`` of every array is Gaussian ``i``."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternions w, x, y, z
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) raw RGB, clamped only at render time
    sh_degree: int = 0

    def __post_init__(self):
        n = len(self.positions)
        for name, width in (("positions", 3), ("rotations", 4), ("log_scales", 3), ("colors", 3)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, width):
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {(n, width)}")
            object.__setattr__(self, name, arr)
        op = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        if op.shape != (n,):
            raise InvalidArgumentError(f"opacity_logits has shape {op.shape}, expected {(n,)}")
        object.__setattr__(self, "opacity_logits", op)
        if self.sh_degree != 0:
            raise InvalidArgumentError("only degree-0 (RGB) color is supported")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianCloud":
        return cls(
            np.array([g.position for g in gaussians], dtype=np.float64).reshape(-1, 3),
            np.array([g.rotation for g in gaussians], dtype=np.float64).reshape(-1, 4),
            np.array([g.log_scale for g in gaussians], dtype=np.float64).reshape(-1, 3),
            np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            np.array([g.color for g in gaussians], dtype=np.float64).reshape(-1, 3),
        )

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "position": self.positions,
            "rotation": self.rotations,
            "log_scale": self.log_scales,
            "opacity": self.opacity_logits,
            "color": self.colors,
        }

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> "GaussianCloud":
        return cls(params["position"], params["rotation"], params["log_scale"],
                   params["opacity"], params["color"])

    def replace(self, **changes) -> "GaussianCloud":
        fields = {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }
        fields.update(changes)
        return GaussianCloud(**{k: np.array(v, dtype=np.float64) for k, v in fields.items()})

    def take(self, index) -> "GaussianCloud":
        return GaussianCloud(self.positions[index], self.rotations[index], self.log_scales[index],
                             self.opacity_logits[index], self.colors[index])

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
        )

    def equals(self, other: "GaussianCloud") -> bool:
        """Bit-exact equality of every parameter array."""
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values())
        )


def init_random_cloud(count: int, extent: float, seed: int) -> GaussianCloud:
    """Isotropic, identity-rotation Gaussians uniformly placed in ``[-extent, extent]^3``.

    The common scale is ``extent * count**(-1/3)`` so the splats roughly tile
    the volume, opacity starts at 0.1 and colors at mid-gray.
    """
    if isinstance(count, bool) or not isinstance(count, (int, np.integer)) or count < 1:
        raise InvalidArgumentError(f"count must be a positive integer, got {count!r}")
    if not np.isfinite(extent) or extent <= 0:
        raise InvalidArgumentError(f"extent must be finite and positive, got {extent!r}")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-extent, extent, size=(count, 3))
    log_scale = np.log(extent * count ** (-1.0 / 3.0))
    return GaussianCloud(
        positions=positions,
        rotations=np.tile(IDENTITY_QUAT, (count, 1)),
        log_scales=np.full((count, 3), log_scale),
        opacity_logits=np.full(count, logit(INIT_OPACITY)),
        colors=np.full((count, 3), 0.5),
    )


# --- quaternion helpers ---------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions (w, x, y, z)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def normalize_quats(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# --- animated scenes -----------------------------------------------------------

Path3 = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class RigidMotion:
    """Rigid motion program evaluated at normalized time.

    ``translation(t)`` returns a 3-vector and ``rotation_angle(t)`` an angle in
    radians about ``axis`` through ``pivot``. Both must vanish at ``t = 0``.
    """

    translation: Path3 = lambda t: np.zeros(3)
    rotation_angle: Callable[[float], float] = lambda t: 0.0
    axis: tuple = (0.0, 0.0, 1.0)
    pivot: tuple = (0.0, 0.0, 0.0)

    def is_identity_at(self, t: float) -> bool:
        return not np.any(np.asarray(self.translation(t))) and self.rotation_angle(t) == 0.0

    @classmethod
    def linear(cls, velocity=(0.0, 0.0, 0.0), angular_speed: float = 0.0,
               axis=(0.0, 0.0, 1.0), pivot=(0.0, 0.0, 0.0)) -> "RigidMotion":
        v = np.asarray(velocity, dtype=np.float64)
        return cls(lambda t: v * t, lambda t: angular_speed * t, tuple(axis), tuple(pivot))


@dataclass(frozen=True)
class AnimatedSceneSpec:
    """A base cloud plus rigid motion programs.

    ``groups`` assigns each Gaussian to one entry of ``motions``; ``None``
    means every Gaussian follows ``motions[0]``.
    """

    base: GaussianCloud
    motions: tuple = (RigidMotion(),)
    groups: np.ndarray | None = None
    background_color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.motions:
            raise InvalidArgumentError("at least one motion program is required")
        if self.groups is not None:
            groups = np.asarray(self.groups, dtype=np.int64)
            if groups.shape != (len(self.base),) or groups.min() < 0 or groups.max() >= len(self.motions):
                raise InvalidArgumentError("groups must index motions, one entry per Gaussian")
            object.__setattr__(self, "groups", groups)


def _apply_rigid(cloud: GaussianCloud, motion: RigidMotion, t: float, index) -> tuple:
    pos = cloud.positions[index]
    rot = cloud.rotations[index]
    angle = float(motion.rotation_angle(t))
    shift = np.asarray(motion.translation(t), dtype=np.float64)
    if angle != 0.0:
        q = axis_angle_quat(motion.axis, angle)
        r = quat_to_rotmat(q)
        pivot = np.asarray(motion.pivot, dtype=np.float64)
        pos = (pos - pivot) @ r.T + pivot
        rot = quat_multiply(q, rot)
    return pos + shift, rot


def evaluate_scene(spec: AnimatedSceneSpec, t: float) -> GaussianCloud:
    """Apply the motion program at normalized time ``t``. The base cloud is not modified."""
    if not (0.0 <= t <= 1.0):
        raise InvalidArgumentError(f"time must lie in [0, 1], got {t!r}")
    base = spec.base
    if t == 0.0:
        return base.replace()
    positions = base.positions.copy()
    rotations = base.rotations.copy()
    groups = spec.groups if spec.groups is not None else np.zeros(len(base), dtype=np.int64)
    for g, motion in enumerate(spec.motions):
        index = np.flatnonzero(groups == g)
        if index.size:
            positions[index], rotations[index] = _apply_rigid(base, motion, t, index)
    return base.replace(positions=positions, rotations=rotations)


# --- presets -------------------------------------------------------------------

PRESETS = ("static-blob", "rigid-translate", "rigid-spin", "two-body")


def random_scene_cloud(count: int, extent: float, seed: int,
                       scale_range=(0.06, 0.14), opacity_range=(0.6, 0.95)) -> GaussianCloud:
    """Colorful anisotropic ground-truth cloud packed in a ball of radius ``extent``."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = extent * rng.uniform(0, 1, size=(count, 1)) ** (1.0 / 3.0)
    quats = normalize_quats(rng.normal(size=(count, 4)))
    quats *= np.where(quats[:, :1] < 0, -1.0, 1.0)
    return GaussianCloud(
        positions=direction * radius,
        rotations=quats,
        log_scales=np.log(rng.uniform(*scale_range, size=(count, 3))),
        opacity_logits=logit(rng.uniform(*opacity_range, size=count)),
        colors=rng.uniform(0.05, 0.95, size=(count, 3)),
    )


def make_preset(name: str, count: int = 50, extent: float = 0.6, seed: int = 0,
                background=(1.0, 1.0, 1.0)) -> AnimatedSceneSpec:
    """Build one of the named ground-truth scenes listed in ``PRESETS``."""
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = random_scene_cloud(count, extent, seed)
    bg = tuple(float(c) for c in background)
    if name == "static-blob":
        return AnimatedSceneSpec(base, background_color=bg)
    if name == "rigid-translate":
        return AnimatedSceneSpec(base, (RigidMotion.linear(velocity=(0.4 * extent, 0.0, 0.0)),),
                                 background_color=bg)
    if name == "rigid-spin":
        return AnimatedSceneSpec(base, (RigidMotion.linear(angular_speed=np.pi / 2),),
                                 background_color=bg)
    groups = (base.positions[:, 0] >= 0).astype(np.int64)
    motions = (
        RigidMotion.linear(velocity=(0.0, 0.0, 0.3 * extent)),
        RigidMotion.linear(angular_speed=np.pi / 3, pivot=(0.5 * extent, 0.0, 0.0)),
    )
    return AnimatedSceneSpec(base, motions, groups, background_color=bg)
