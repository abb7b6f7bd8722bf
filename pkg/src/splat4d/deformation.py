"""Dynamic stage: factorised space-time feature planes plus a micro-MLP deformation decoder.

Six feature planes cover the axis pairs (x,y), (x,z), (y,z), (x,t), (y,t),
(z,t). A query bilinearly samples every plane at each resolution level,
multiplies the six samples elementwise, and concatenates the per-level
products. The decoder maps those features to position, rotation and
log-scale offsets for each canonical Gaussian.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InvalidArgumentError, NumericError
from .image_matrix import ImageMatrix
from .rasterizer import CloudGradients, render, render_backward
from .scene import GaussianCloud
from .static_fit import LogRow, OracleDenoiser, SdsSchedule, adam_update, mse_loss_and_grad, sds_loss_grad

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
SPATIAL_PLANES = (0, 1, 2)
HEAD_NAMES = ("position", "rotation", "scale")
HEAD_WIDTHS = {"position": 3, "rotation": 4, "scale": 3}
MLP_PARAM_NAMES = ("w1", "b1", "w2", "b2") + tuple(f"{h}_{wb}" for h in HEAD_NAMES for wb in ("w", "b"))


class PlaneEncoder:
    """Multi-resolution six-plane grid over ``[-extent, extent]^3 x [0, 1]``.

    ``planes[level][k]`` has shape ``(res, res, features)`` with ``res =
    base_resolution * 2**level``; its first index follows the first axis of
    ``PLANE_AXES[k]``. Queries outside the domain are clamped to its boundary.
    """

    def __init__(self, planes, extent: float):
        self.planes = [[np.asarray(p, dtype=np.float64) for p in level] for level in planes]
        self.extent = float(extent)
        if not (math.isfinite(self.extent) and self.extent > 0):
            raise InvalidArgumentError(f"extent must be positive, got {extent}")
        if not self.planes or any(len(level) != 6 for level in self.planes):
            raise InvalidArgumentError("each level needs exactly six planes")
        self.features = self.planes[0][0].shape[2]
        self.base_resolution = self.planes[0][0].shape[0]
        for lvl, level in enumerate(self.planes):
            res = self.base_resolution << lvl
            for p in level:
                if p.shape != (res, res, self.features):
                    raise InvalidArgumentError(f"level {lvl} plane has shape {p.shape}, expected "
                                               f"{(res, res, self.features)}")

    @classmethod
    def create(cls, base_resolution: int = 16, levels: int = 2, features: int = 8,
               extent: float = 1.0, seed: int = 0) -> "PlaneEncoder":
        """Spatial planes start uniform in [0.1, 0.5], time planes at exactly one."""
        if base_resolution < 2 or levels < 1 or features < 1:
            raise InvalidArgumentError("need base_resolution >= 2, levels >= 1, features >= 1")
        rng = np.random.default_rng(seed)
        planes = []
        for lvl in range(levels):
            res = base_resolution << lvl
            planes.append([rng.uniform(0.1, 0.5, size=(res, res, features)) if k in SPATIAL_PLANES
                           else np.ones((res, res, features)) for k in range(6)])
        return cls(planes, extent)

    @property
    def levels(self) -> int:
        return len(self.planes)

    @property
    def out_features(self) -> int:
        return self.levels * self.features

    def grid_coords(self, positions: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Normalised [0, 1] coordinates (N, 4) and a mask of unclamped spatial entries."""
        n = len(positions)
        raw = np.empty((n, 4))
        raw[:, :3] = (positions + self.extent) / (2.0 * self.extent)
        raw[:, 3] = t
        coords = np.clip(raw, 0.0, 1.0)
        return coords, (raw > 0.0) & (raw < 1.0)


@dataclass
class MicroMlp:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: dict  # name -> (weight, bias)
    enabled: dict = field(default_factory=lambda: {name: True for name in HEAD_NAMES})

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def in_features(self) -> int:
        return self.w1.shape[1]

    @staticmethod
    def shapes(in_features: int, hidden: int) -> list[tuple]:
        out = [(hidden, in_features), (hidden,), (hidden, hidden), (hidden,)]
        for name in HEAD_NAMES:
            out += [(HEAD_WIDTHS[name], hidden), (HEAD_WIDTHS[name],)]
        return out

    @classmethod
    def create(cls, in_features: int, hidden: int = 32, seed: int = 0, enabled=None) -> "MicroMlp":
        """He-uniform hidden layers; heads start at zero so the deformation is the identity."""
        rng = np.random.default_rng(seed)

        def he(fan_out, fan_in):
            bound = math.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        heads = {name: (np.zeros((HEAD_WIDTHS[name], hidden)), np.zeros(HEAD_WIDTHS[name]))
                 for name in HEAD_NAMES}
        flags = {name: True for name in HEAD_NAMES}
        flags.update(enabled or {})
        return cls(he(hidden, in_features), np.zeros(hidden), he(hidden, hidden), np.zeros(hidden),
                   heads, flags)

    @classmethod
    def from_arrays(cls, arrays, enabled=None) -> "MicroMlp":
        w1, b1, w2, b2 = (np.asarray(a, dtype=np.float64) for a in arrays[:4])
        heads = {name: (np.asarray(arrays[4 + 2 * i], dtype=np.float64),
                        np.asarray(arrays[5 + 2 * i], dtype=np.float64))
                 for i, name in enumerate(HEAD_NAMES)}
        flags = {name: True for name in HEAD_NAMES}
        flags.update(enabled or {})
        return cls(w1, b1, w2, b2, heads, flags)

    def arrays(self) -> list[np.ndarray]:
        out = [self.w1, self.b1, self.w2, self.b2]
        for name in HEAD_NAMES:
            out += list(self.heads[name])
        return out


@dataclass
class DeformationField:
    encoder: PlaneEncoder
    decoder: MicroMlp

    def __post_init__(self):
        if self.decoder.in_features != self.encoder.out_features:
            raise InvalidArgumentError(f"decoder expects {self.decoder.in_features} inputs, encoder "
                                       f"produces {self.encoder.out_features}")

    @classmethod
    def create(cls, extent: float, base_resolution: int = 16, levels: int = 2, features: int = 8,
               hidden: int = 32, seed: int = 0, enabled=None) -> "DeformationField":
        enc = PlaneEncoder.create(base_resolution, levels, features, extent, seed)
        dec = MicroMlp.create(enc.out_features, hidden, seed + 1, enabled)
        return cls(enc, dec)

    def params(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable array (shared, not copied)."""
        out = {}
        for lvl, level in enumerate(self.encoder.planes):
            for k, p in enumerate(level):
                out[f"plane{lvl}_{k}"] = p
        out.update(zip(MLP_PARAM_NAMES, self.decoder.arrays()))
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "DeformationField":
        planes = [[params[f"plane{lvl}_{k}"] for k in range(6)] for lvl in range(self.encoder.levels)]
        enc = PlaneEncoder(planes, self.encoder.extent)
        dec = MicroMlp.from_arrays([params[n] for n in MLP_PARAM_NAMES], self.decoder.enabled)
        return DeformationField(enc, dec)

    def copy(self) -> "DeformationField":
        return self.with_params({k: v.copy() for k, v in self.params().items()})


# --- encoder -------------------------------------------------------------------

@dataclass
class _PlaneSample:
    i0: np.ndarray
    j0: np.ndarray
    fi: np.ndarray
    fj: np.ndarray
    value: np.ndarray  # (N, F)


def _sample_plane(grid: np.ndarray, ci: np.ndarray, cj: np.ndarray) -> _PlaneSample:
    res = grid.shape[0]
    gi = ci * (res - 1)
    gj = cj * (res - 1)
    i0 = np.minimum(np.floor(gi).astype(np.int64), res - 2)
    j0 = np.minimum(np.floor(gj).astype(np.int64), res - 2)
    fi = (gi - i0)[:, None]
    fj = (gj - j0)[:, None]
    # nested lerps: exact at nodes and exact along any axis the grid is constant on
    g00, g01 = grid[i0, j0], grid[i0, j0 + 1]
    near = g00 + fi * (grid[i0 + 1, j0] - g00)
    far = g01 + fi * (grid[i0 + 1, j0 + 1] - g01)
    value = near + fj * (far - near)
    return _PlaneSample(i0, j0, fi, fj, value)


def _encode(encoder: PlaneEncoder, positions: np.ndarray, t: float):
    coords, live = encoder.grid_coords(positions, t)
    samples = []
    feats = []
    for level in encoder.planes:
        lvl_samples = [_sample_plane(p, coords[:, a], coords[:, b]) for p, (a, b) in zip(level, PLANE_AXES)]
        prod = lvl_samples[0].value
        for s in lvl_samples[1:]:
            prod = prod * s.value
        samples.append(lvl_samples)
        feats.append(prod)
    return np.concatenate(feats, axis=1), (samples, live)


def encode(field: DeformationField, position, t: float) -> np.ndarray:
    """Feature vector(s) for one (3,) position or a batch (N, 3) at time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"time must lie in [0, 1], got {t}")
    pos = np.asarray(position, dtype=np.float64)
    feats, _ = _encode(field.encoder, pos.reshape(-1, 3), t)
    return feats[0] if pos.ndim == 1 else feats


# --- deformation ---------------------------------------------------------------

@dataclass
class _DeformCache:
    features: np.ndarray
    enc: tuple
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    raw_rot: np.ndarray  # q + dq
    renormalised: np.ndarray  # rows where q + dq was renormalised


def _deform(field: DeformationField, cloud: GaussianCloud, t: float):
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"time must lie in [0, 1], got {t}")
    dec = field.decoder
    feats, enc = _encode(field.encoder, cloud.positions, t)
    pre1 = feats @ dec.w1.T + dec.b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ dec.w2.T + dec.b2
    h2 = np.maximum(pre2, 0.0)

    positions, rotations, log_scales = cloud.positions, cloud.rotations, cloud.log_scales
    raw_rot = rotations
    moved = np.zeros(len(cloud), dtype=bool)
    if dec.enabled["position"]:
        w, b = dec.heads["position"]
        positions = positions + (h2 @ w.T + b)
    if dec.enabled["rotation"]:
        w, b = dec.heads["rotation"]
        dq = h2 @ w.T + b
        raw_rot = rotations + dq
        # rows with an exactly-zero offset keep the canonical quaternion bit for bit
        moved = np.any(dq != 0.0, axis=1)
        rotations = rotations.copy()
        rotations[moved] = raw_rot[moved] / np.linalg.norm(raw_rot[moved], axis=1, keepdims=True)
    if dec.enabled["scale"]:
        w, b = dec.heads["scale"]
        log_scales = log_scales + (h2 @ w.T + b)
    deformed = GaussianCloud(positions, rotations, log_scales, cloud.opacity_logits, cloud.colors)
    return deformed, _DeformCache(feats, enc, pre1, h1, pre2, h2, raw_rot, moved)


def deform(field: DeformationField, cloud: GaussianCloud, t: float) -> GaussianCloud:
    """The canonical cloud moved to normalised time ``t``; opacity and colour are untouched."""
    return _deform(field, cloud, t)[0]


def deform_backward(field: DeformationField, cloud: GaussianCloud, t: float,
                    d_deformed: CloudGradients, cache: _DeformCache | None = None):
    """Chain gradients on the deformed cloud back to field parameters and the canonical cloud.

    Returns ``(field_grads, d_cloud)`` where ``field_grads`` is keyed like
    :meth:`DeformationField.params`.
    """
    n = len(cloud)
    for name, arr in d_deformed.params().items():
        if len(arr) != n:
            raise ContractError(f"gradient {name} has {len(arr)} rows, cloud has {n}")
    if cache is None:
        _, cache = _deform(field, cloud, t)
    dec, enc = field.decoder, field.encoder
    grads = {k: np.zeros_like(v) for k, v in field.params().items()}

    d_h2 = np.zeros_like(cache.h2)
    d_rot_canon = d_deformed.rotation
    if dec.enabled["position"]:
        g = d_deformed.position
        w, _ = dec.heads["position"]
        grads["position_w"] = g.T @ cache.h2
        grads["position_b"] = g.sum(axis=0)
        d_h2 += g @ w
    if dec.enabled["rotation"]:
        raw = cache.raw_rot
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        unit = raw / norm
        g = d_deformed.rotation
        g = (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / norm
        w, _ = dec.heads["rotation"]
        grads["rotation_w"] = g.T @ cache.h2
        grads["rotation_b"] = g.sum(axis=0)
        d_h2 += g @ w
        d_rot_canon = g
    if dec.enabled["scale"]:
        g = d_deformed.log_scale
        w, _ = dec.heads["scale"]
        grads["scale_w"] = g.T @ cache.h2
        grads["scale_b"] = g.sum(axis=0)
        d_h2 += g @ w

    d_pre2 = d_h2 * (cache.pre2 > 0.0)
    grads["w2"] = d_pre2.T @ cache.h1
    grads["b2"] = d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ dec.w2) * (cache.pre1 > 0.0)
    grads["w1"] = d_pre1.T @ cache.features
    grads["b1"] = d_pre1.sum(axis=0)
    d_feat = d_pre1 @ dec.w1

    samples, live = cache.enc
    d_coord = np.zeros((n, 4))
    nf = enc.features
    for lvl, lvl_samples in enumerate(samples):
        d_prod = d_feat[:, lvl * nf:(lvl + 1) * nf]
        for k, s in enumerate(lvl_samples):
            others = np.ones_like(d_prod)
            for j, o in enumerate(lvl_samples):
                if j != k:
                    others = others * o.value
            d_val = d_prod * others
            grid = enc.planes[lvl][k]
            g = grads[f"plane{lvl}_{k}"]
            np.add.at(g, (s.i0, s.j0), (1.0 - s.fi) * (1.0 - s.fj) * d_val)
            np.add.at(g, (s.i0 + 1, s.j0), s.fi * (1.0 - s.fj) * d_val)
            np.add.at(g, (s.i0, s.j0 + 1), (1.0 - s.fi) * s.fj * d_val)
            np.add.at(g, (s.i0 + 1, s.j0 + 1), s.fi * s.fj * d_val)
            res_scale = grid.shape[0] - 1
            g00, g10 = grid[s.i0, s.j0], grid[s.i0 + 1, s.j0]
            g01, g11 = grid[s.i0, s.j0 + 1], grid[s.i0 + 1, s.j0 + 1]
            dv_di = (1.0 - s.fj) * (g10 - g00) + s.fj * (g11 - g01)
            dv_dj = (1.0 - s.fi) * (g01 - g00) + s.fi * (g11 - g10)
            a, b = PLANE_AXES[k]
            d_coord[:, a] += res_scale * np.sum(d_val * dv_di, axis=1)
            d_coord[:, b] += res_scale * np.sum(d_val * dv_dj, axis=1)
    d_pos_enc = np.where(live[:, :3], d_coord[:, :3], 0.0) / (2.0 * enc.extent)

    d_cloud = CloudGradients(
        position=d_deformed.position + d_pos_enc,
        rotation=d_rot_canon,
        log_scale=d_deformed.log_scale.copy(),
        opacity=d_deformed.opacity.copy(),
        color=d_deformed.color.copy(),
        screen_grad=d_deformed.screen_grad.copy(),
        visibility_count=d_deformed.visibility_count.copy(),
    )
    return grads, d_cloud


# --- training ------------------------------------------------------------------

def _check_cells(matrix: ImageMatrix, cells) -> list[tuple[int, int]]:
    cells = sorted({(int(v), int(t)) for v, t in cells})
    if not cells:
        raise InvalidArgumentError("cell batch is empty")
    for v, t in cells:
        if not (0 <= v < matrix.num_views and 0 <= t < matrix.num_times):
            raise InvalidArgumentError(f"cell {(v, t)} outside a {matrix.num_views}x{matrix.num_times} matrix")
    return cells


def reference_loss(field: DeformationField, canonical: GaussianCloud, matrix: ImageMatrix, cells,
                   threads: int = 1, with_grad: bool = True):
    """Mean image MSE over a batch of (view, time) cells.

    Cells are reduced in sorted order, so the result does not depend on the
    order they are listed in. Returns ``(loss, field_grads, d_canonical)``;
    the gradients are ``None`` when ``with_grad`` is false.
    """
    cells = _check_cells(matrix, cells)
    bg = np.asarray(matrix.background)
    intr = matrix.intrinsics
    scale = 1.0 / len(cells)
    total = 0.0
    field_grads = {k: np.zeros_like(v) for k, v in field.params().items()} if with_grad else None
    d_canon = CloudGradients.zeros(len(canonical)) if with_grad else None
    by_time: dict[int, list[int]] = {}
    for v, t in cells:
        by_time.setdefault(t, []).append(v)
    for t_idx in sorted(by_time):
        t = float(matrix.times[t_idx])
        deformed, cache = _deform(field, canonical, t)
        d_deformed = CloudGradients.zeros(len(canonical)) if with_grad else None
        for v in by_time[t_idx]:
            out = render(deformed, matrix.views[v], intr, bg, threads=threads)
            loss, d_img = mse_loss_and_grad(out.image, matrix.cells[v, t_idx])
            total += loss * scale
            if with_grad:
                d_deformed = d_deformed + render_backward(deformed, matrix.views[v], intr, bg,
                                                          d_img * scale, forward=out, threads=threads)
        if with_grad:
            fg, dc = deform_backward(field, canonical, t, d_deformed, cache)
            for k in field_grads:
                field_grads[k] += fg[k]
            d_canon = d_canon + dc
    return total, field_grads, d_canon


@dataclass
class DynamicConfig:
    steps: int = 600
    seed: int = 0
    batch_size: int = 4
    base_resolution: int = 16
    levels: int = 2
    features: int = 8
    hidden: int = 32
    extent: float | None = None  # None: 1.1 x the largest canonical coordinate
    heads: dict = field(default_factory=lambda: {name: True for name in HEAD_NAMES})
    lr_planes: float = 1e-2
    lr_mlp: float = 2e-3
    lr_decay: float = 0.1  # final lr as a fraction of the initial one
    train_canonical: bool = False
    canonical_lr: dict = field(default_factory=lambda: {"position": 1e-4, "rotation": 1e-3,
                                                        "log_scale": 1e-3, "opacity": 1e-2,
                                                        "color": 5e-3})
    sds_weight: float = 0.0
    sds_t_max: float = 0.98
    sds_t_min: float = 0.02
    threads: int = 1


@dataclass
class DynamicFitResult:
    field: DeformationField
    log: list
    canonical: GaussianCloud


def default_field_extent(cloud: GaussianCloud) -> float:
    # rounded to float32 so the checkpoint header stores it exactly
    return float(np.float32(1.1 * float(np.max(np.abs(cloud.positions)))))


def to_float32(field_: DeformationField) -> DeformationField:
    """Field with every parameter rounded to float32, i.e. exactly what a checkpoint stores."""
    out = field_.with_params({k: v.astype(np.float32).astype(np.float64) for k, v in field_.params().items()})
    out.encoder.extent = float(np.float32(out.encoder.extent))
    return out


def fit_dynamic(canonical: GaussianCloud, matrix: ImageMatrix, config: DynamicConfig | None = None,
                callback=None) -> DynamicFitResult:
    """Train a deformation field so the deformed canonical cloud reproduces every matrix cell."""
    cfg = config or DynamicConfig()
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise InvalidArgumentError("steps must be >= 0 and batch_size >= 1")
    extent = cfg.extent or default_field_extent(canonical)
    field_ = DeformationField.create(extent, cfg.base_resolution, cfg.levels, cfg.features,
                                     cfg.hidden, cfg.seed, cfg.heads)
    rng = np.random.default_rng([cfg.seed, 2])
    all_cells = matrix.cell_indices()
    batch = min(cfg.batch_size, len(all_cells))
    params = field_.params()
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    canon = canonical
    cm1 = {k: np.zeros_like(v) for k, v in canon.params().items()}
    cm2 = {k: np.zeros_like(v) for k, v in canon.params().items()}
    schedule = SdsSchedule(cfg.sds_t_max, cfg.sds_t_min, max(cfg.steps, 1))
    denoiser = OracleDenoiser(schedule) if cfg.sds_weight > 0 else None
    rows = []
    t0 = time.perf_counter()

    for step in range(cfg.steps):
        pick = rng.choice(len(all_cells), size=batch, replace=False)
        cells = [all_cells[i] for i in pick]
        loss, grads, d_canon = reference_loss(field_, canon, matrix, cells, threads=cfg.threads)
        if denoiser is not None:
            sds_grads, sds_canon = _sds_term(field_, canon, matrix, cells, schedule, denoiser, step,
                                             int(rng.integers(2**63)), cfg)
            for k in grads:
                grads[k] += sds_grads[k]
            d_canon = d_canon + sds_canon
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        decay = cfg.lr_decay ** (step / max(cfg.steps, 1))
        lr = {k: (cfg.lr_planes if k.startswith("plane") else cfg.lr_mlp) * decay for k in params}
        params = adam_update(params, grads, m1, m2, step + 1, lr)
        field_ = field_.with_params(params)
        if cfg.train_canonical:
            new = adam_update(canon.params(), d_canon.params(), cm1, cm2, step + 1, cfg.canonical_lr)
            q = new["rotation"]
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            canon = GaussianCloud.from_params(new)
        row = LogRow(step + 1, loss, _psnr_from_mse(loss), len(canon), (time.perf_counter() - t0) * 1000.0)
        rows.append(row)
        if callback is not None:
            callback(field_, row)
    return DynamicFitResult(to_float32(field_), rows, canon)


def _psnr_from_mse(mse: float) -> float:
    return 100.0 if mse <= 0 else min(10.0 * math.log10(1.0 / mse), 100.0)


def _sds_term(field_, canon, matrix, cells, schedule, denoiser, step, seed, cfg):
    """Score-distillation gradients on the deformed renders, using each cell as the reference."""
    bg = np.asarray(matrix.background)
    grads = {k: np.zeros_like(v) for k, v in field_.params().items()}
    d_canon = CloudGradients.zeros(len(canon))
    from .camera import relative_pose
    for i, (v, t_idx) in enumerate(sorted(cells)):
        t = float(matrix.times[t_idx])
        deformed, cache = _deform(field_, canon, t)
        out = render(deformed, matrix.views[v], matrix.intrinsics, bg, threads=cfg.threads)
        d_img = sds_loss_grad(out.image, denoiser, schedule, step, matrix.cells[v, t_idx],
                              relative_pose(matrix.views[0], matrix.views[v]), seed=seed + i)
        d_img *= cfg.sds_weight / len(cells)
        gd = render_backward(deformed, matrix.views[v], matrix.intrinsics, bg, d_img, forward=out,
                             threads=cfg.threads)
        fg, dc = deform_backward(field_, canon, t, gd, cache)
        for k in grads:
            grads[k] += fg[k]
        d_canon = d_canon + dc
    return grads, d_canon
