"""The views x timestamps image matrix and its synthetic generator.

Rows are views, columns are timestamps; ``cells[v, t]`` is the image seen
from ``views[v]`` at ``times[t]``. That orientation is part of the public
contract (sequence extraction in :mod:`splat4d.metrics` relies on it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, SphericalPose
from .errors import InvalidArgumentError, SchemaError, StorageError
from .io import read_png, write_png
from .rasterizer import render
from .scene import AnimatedSceneSpec, evaluate_scene

SCHEMA_VERSION = 1
CELL_TEMPLATE = "cells/v{v:03d}_t{t:03d}.png"


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0:
        raise InvalidArgumentError("at least one timestamp is required")
    if times[0] != 0.0:
        raise InvalidArgumentError(f"times must start at 0 (canonical frame), got {times[0]}")
    if np.any(np.diff(times) <= 0) or times[-1] > 1.0:
        raise InvalidArgumentError("times must be strictly increasing within [0, 1]")
    return times


@dataclass(frozen=True, eq=False)
class ImageMatrix:
    views: tuple
    times: np.ndarray
    cells: np.ndarray  # (V, T, H, W, 3)
    intrinsics: CameraIntrinsics
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise InvalidArgumentError("an image matrix needs at least one view")
        times = _check_times(self.times)
        cells = np.asarray(self.cells, dtype=np.float64)
        want = (len(views), len(times), self.intrinsics.height, self.intrinsics.width, 3)
        if cells.shape != want:
            raise InvalidArgumentError(f"cells have shape {cells.shape}, expected {want}")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def num_times(self) -> int:
        return len(self.times)

    def cell(self, v: int, t: int) -> np.ndarray:
        return self.cells[v, t]

    def cell_indices(self) -> list[tuple[int, int]]:
        """All (view, time) pairs in row-major order."""
        return [(v, t) for v in range(self.num_views) for t in range(self.num_times)]


def synthesize_matrix(spec: AnimatedSceneSpec, rig, times, intrinsics: CameraIntrinsics,
                      background=None, seed: int = 0, noise_sigma: float = 0.0,
                      threads: int = 1) -> ImageMatrix:
    """Render the animated scene from every rig pose at every timestamp.

    ``noise_sigma > 0`` adds seeded Gaussian pixel noise per cell, a stand-in
    for imperfect generated supervision.
    """
    rig = list(rig)
    if not rig:
        raise InvalidArgumentError("rig must contain at least one pose")
    times = _check_times(times)
    if background is None:
        background = spec.background_color
    cells = np.empty((len(rig), len(times), intrinsics.height, intrinsics.width, 3))
    rng = np.random.default_rng(seed)
    for t_idx, t in enumerate(times):
        cloud = evaluate_scene(spec, float(t))
        for v_idx, pose in enumerate(rig):
            cells[v_idx, t_idx] = render(cloud, pose, intrinsics, background, threads=threads).image
    if noise_sigma > 0:
        cells = cells + rng.normal(0.0, noise_sigma, size=cells.shape)
    return ImageMatrix(tuple(rig), times, cells, intrinsics, tuple(background))


def save_matrix(matrix: ImageMatrix, dir_path) -> Path:
    """Write ``manifest.json`` and one 8-bit PNG per cell. Returns the manifest path."""
    root = Path(dir_path)
    try:
        (root / "cells").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {root}: {exc}") from exc
    intr = matrix.intrinsics
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "width": intr.width,
        "height": intr.height,
        "focal": intr.focal,
        "near": intr.near,
        "far": intr.far,
        "background": list(matrix.background),
        "num_views": matrix.num_views,
        "num_times": matrix.num_times,
        "views": [p.as_dict() for p in matrix.views],
        "times": [float(t) for t in matrix.times],
        "cell_template": CELL_TEMPLATE,
    }
    for v, t in matrix.cell_indices():
        write_png(matrix.cells[v, t], root / CELL_TEMPLATE.format(v=v, t=t))
    path = root / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def _field(manifest: dict, key: str, kind):
    if key not in manifest:
        raise SchemaError(f"manifest missing field {key!r}")
    value = manifest[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is list and isinstance(value, list):
        return value
    if kind is str and isinstance(value, str):
        return value
    raise SchemaError(f"manifest field {key!r} has wrong type {type(value).__name__}")


def load_matrix(manifest_path) -> ImageMatrix:
    """Load a matrix from ``manifest.json`` (or the directory holding it)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise SchemaError(f"manifest not found: {path}") from exc
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise SchemaError("manifest must be a JSON object")
    version = _field(manifest, "schema_version", int)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}")
    try:
        intr = CameraIntrinsics(_field(manifest, "width", int), _field(manifest, "height", int),
                                _field(manifest, "focal", float), _field(manifest, "near", float),
                                _field(manifest, "far", float))
    except InvalidArgumentError as exc:
        raise SchemaError(f"bad intrinsics: {exc}") from exc
    background = _field(manifest, "background", list)
    if len(background) != 3:
        raise SchemaError("background must have 3 components")
    views = []
    for i, entry in enumerate(_field(manifest, "views", list)):
        try:
            views.append(SphericalPose(entry["theta"], entry["phi"], entry["radius"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"view {i}: bad pose entry {entry!r}") from exc
    times = _field(manifest, "times", list)
    if not views or not times:
        raise SchemaError("manifest needs at least one view and one timestamp")
    if "num_views" in manifest and manifest["num_views"] != len(views):
        raise SchemaError(f"manifest lists {manifest['num_views']} views but {len(views)} pose entries")
    if "num_times" in manifest and manifest["num_times"] != len(times):
        raise SchemaError(f"manifest lists {manifest['num_times']} times but {len(times)} entries")
    try:
        times = _check_times(times)
    except (InvalidArgumentError, ValueError, TypeError) as exc:
        raise SchemaError(f"bad times: {exc}") from exc
    template = manifest.get("cell_template", CELL_TEMPLATE)
    cells = np.empty((len(views), len(times), intr.height, intr.width, 3))
    for v in range(len(views)):
        for t in range(len(times)):
            name = template.format(v=v, t=t)
            cell_path = path.parent / name
            if not cell_path.exists():
                raise SchemaError(f"missing cell (v={v}, t={t}): {name}")
            img = read_png(cell_path)
            if img.shape != cells.shape[2:]:
                raise SchemaError(f"cell (v={v}, t={t}) {name} has shape {img.shape}, "
                                  f"expected {cells.shape[2:]}")
            cells[v, t] = img
    return ImageMatrix(tuple(views), times, cells, intr, tuple(float(c) for c in background))
