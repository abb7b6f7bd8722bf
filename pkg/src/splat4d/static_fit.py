"""Static stage: fit a Gaussian cloud to the canonical (t = 0) column of an image matrix."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .camera import RelativePose, relative_pose
from .errors import ContractError, InvalidArgumentError, NumericError
from .image_matrix import ImageMatrix
from .metrics import psnr
from .rasterizer import CloudGradients, render, render_backward
from .scene import GaussianCloud, init_random_cloud, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

PARAM_SHAPES = {"position": (3,), "rotation": (4,), "log_scale": (3,), "opacity": (), "color": (3,)}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SPLIT_SCALE_DIVISOR = 1.6


@dataclass(frozen=True, eq=False)
class TrainState:
    cloud: GaussianCloud
    moment1: dict
    moment2: dict
    step: int
    grad_accum: np.ndarray  # summed screen-space gradient norm per Gaussian
    grad_count: np.ndarray  # number of views each Gaussian was visible in
    rng_seed: int = 0

    @classmethod
    def initial(cls, cloud: GaussianCloud, rng_seed: int = 0) -> "TrainState":
        zeros = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        return cls(cloud, zeros, {k: v.copy() for k, v in zeros.items()}, 0,
                   np.zeros(len(cloud)), np.zeros(len(cloud)), rng_seed)


# --- losses --------------------------------------------------------------------

def mse_loss_and_grad(rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InvalidArgumentError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass(frozen=True)
class SdsSchedule:
    """Diffusion timestep annealed linearly from ``t_max`` to ``t_min``; cosine noise schedule."""

    t_max: float = 0.98
    t_min: float = 0.02
    total_steps: int = 1000
    offset: float = 0.008

    def __post_init__(self):
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise InvalidArgumentError(f"need 0 < t_min < t_max < 1, got {self.t_min}, {self.t_max}")
        if self.total_steps < 1:
            raise InvalidArgumentError("total_steps must be >= 1")

    def timestep(self, step: int) -> float:
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return self.t_max + (self.t_min - self.t_max) * frac

    def alpha_bar(self, t: float) -> float:
        s = self.offset
        f = math.cos(0.5 * math.pi * (t + s) / (1 + s)) ** 2
        return f / math.cos(0.5 * math.pi * s / (1 + s)) ** 2


class Denoiser(Protocol):
    def __call__(self, noisy: np.ndarray, timestep: float, reference_image: np.ndarray,
                 relative_pose: RelativePose) -> np.ndarray:
        """Predict the noise contained in ``noisy``."""


class OracleDenoiser:
    """Predicts noise exactly as if the clean image were ``reference_image``."""

    def __init__(self, schedule: SdsSchedule):
        self.schedule = schedule

    def __call__(self, noisy, timestep, reference_image, relative_pose):
        ab = self.schedule.alpha_bar(timestep)
        return (noisy - math.sqrt(ab) * reference_image) / math.sqrt(1.0 - ab)


DENOISERS = {"oracle": OracleDenoiser}


def sds_loss_grad(rendered: np.ndarray, denoiser: Denoiser, schedule: SdsSchedule, step: int,
                  reference_image: np.ndarray, relative_pose: RelativePose,
                  weight_fn: Callable[[float], float] | None = None, seed: int = 0) -> np.ndarray:
    """Image-space score-distillation gradient ``w(t) * (eps_hat - eps)``.

    Chain the result through :func:`render_backward` to reach Gaussian parameters.
    """
    t = schedule.timestep(step)
    ab = schedule.alpha_bar(t)
    eps = np.random.default_rng(seed).standard_normal(np.shape(rendered))
    noisy = math.sqrt(ab) * rendered + math.sqrt(1.0 - ab) * eps
    eps_hat = np.asarray(denoiser(noisy, t, reference_image, relative_pose))
    if eps_hat.shape != eps.shape:
        raise ContractError(f"denoiser returned shape {eps_hat.shape}, expected {eps.shape}")
    w = 1.0 if weight_fn is None else weight_fn(t)
    return w * (eps_hat - eps)


# --- optimizer -----------------------------------------------------------------

def adam_update(params: dict, grads: dict, moment1: dict, moment2: dict, step: int,
                lr_table: dict) -> dict:
    """Generic Adam update on name -> array dicts; moments are updated in place.

    ``step`` counts from 1. Parameters missing from ``lr_table`` are frozen.
    """
    bc1 = 1.0 - ADAM_BETA1 ** step
    bc2 = 1.0 - ADAM_BETA2 ** step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = ADAM_BETA1 * moment1[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * moment2[name] + (1.0 - ADAM_BETA2) * (g * g)
        moment1[name], moment2[name] = m, v
        out[name] = p - lr_table.get(name, 0.0) * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return out


def adam_step(state: TrainState, grads: CloudGradients, lr_table: dict) -> TrainState:
    """One Adam update with per-group learning rates; quaternions are renormalised."""
    params = state.cloud.params()
    g = grads.params()
    for name, arr in g.items():
        if arr.shape != params[name].shape or state.moment1[name].shape != params[name].shape:
            raise InvalidArgumentError(f"{name}: gradient/moment shape does not match cloud")
        bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
        if bad.any():
            raise NumericError(f"non-finite {name} gradient for Gaussian {int(np.flatnonzero(bad)[0])}")
    step = state.step + 1
    m1 = {k: v.copy() for k, v in state.moment1.items()}
    m2 = {k: v.copy() for k, v in state.moment2.items()}
    new_params = adam_update(params, g, m1, m2, step, lr_table)
    q = new_params["rotation"]
    moved = np.any(q != params["rotation"], axis=1)
    if moved.any():
        q[moved] /= np.linalg.norm(q[moved], axis=1, keepdims=True)
    cloud = GaussianCloud.from_params(new_params)
    return replace(state, cloud=cloud, moment1=m1, moment2=m2, step=step)


def accumulate_densify_stats(state: TrainState, grads: CloudGradients) -> TrainState:
    seen = grads.visibility_count > 0
    return replace(state, grad_accum=state.grad_accum + np.where(seen, grads.screen_grad, 0.0),
                   grad_count=state.grad_count + seen)


def densify_and_prune(state: TrainState, grad_threshold: float, scale_threshold: float,
                      opacity_floor: float) -> TrainState:
    """Clone small / split large high-gradient Gaussians, then drop near-transparent ones.

    Surviving Gaussians keep their order and moments; new Gaussians are
    appended with zeroed moments. Densification statistics are reset.
    """
    cloud = state.cloud
    n = len(cloud)
    mean_grad = state.grad_accum / np.maximum(state.grad_count, 1.0)
    hot = mean_grad > grad_threshold
    max_scale = cloud.scales.max(axis=1)
    clone = hot & (max_scale < scale_threshold)
    split = hot & ~clone
    rng = np.random.default_rng([state.rng_seed, state.step])

    pieces = [cloud.take(np.flatnonzero(~split))]
    if clone.any():
        src = cloud.take(np.flatnonzero(clone))
        ball = rng.normal(size=(len(src), 3))
        ball *= (rng.uniform(size=(len(src), 1)) ** (1 / 3)) / np.linalg.norm(ball, axis=1, keepdims=True)
        rot = quat_to_rotmat(src.rotations / np.linalg.norm(src.rotations, axis=1, keepdims=True))
        offset = np.einsum("nij,nj->ni", rot, ball * src.scales)
        pieces.append(src.replace(positions=src.positions + offset))
    if split.any():
        src = cloud.take(np.flatnonzero(split))
        rot = quat_to_rotmat(src.rotations / np.linalg.norm(src.rotations, axis=1, keepdims=True))
        major = np.argmax(src.log_scales, axis=1)
        rows = np.arange(len(src))
        axis = rot[rows, :, major] * src.scales[rows, major][:, None]
        shrunk = src.log_scales - math.log(SPLIT_SCALE_DIVISOR)
        for sign in (1.0, -1.0):
            pieces.append(src.replace(positions=src.positions + sign * 0.5 * axis, log_scales=shrunk))
    grown = pieces[0]
    for piece in pieces[1:]:
        grown = grown.concat(piece)
    n_new = len(grown) - int(np.count_nonzero(~split))

    def carry(moments):
        out = {}
        for name, arr in moments.items():
            kept = arr[~split]
            out[name] = np.concatenate([kept, np.zeros((n_new,) + arr.shape[1:])])
        return out

    m1, m2 = carry(state.moment1), carry(state.moment2)
    keep = sigmoid(grown.opacity_logits) >= opacity_floor
    if not keep.any():
        raise InvalidArgumentError(f"opacity floor {opacity_floor} would prune every Gaussian")
    idx = np.flatnonzero(keep)
    grown = grown.take(idx)
    m1 = {k: v[idx] for k, v in m1.items()}
    m2 = {k: v[idx] for k, v in m2.items()}
    log.debug("densify at step %d: %d -> %d (clone %d, split %d)", state.step, n, len(grown),
              clone.sum(), split.sum())
    return replace(state, cloud=grown, moment1=m1, moment2=m2,
                   grad_accum=np.zeros(len(grown)), grad_count=np.zeros(len(grown)))


# --- fitting loop --------------------------------------------------------------

def _default_lr() -> dict:
    return {"position": 2e-3, "rotation": 5e-3, "log_scale": 1e-2, "opacity": 5e-2, "color": 2e-2}


@dataclass
class StaticConfig:
    steps: int = 5000
    seed: int = 0
    init_count: int = 100
    init_extent: float | None = None  # None: derived from the camera footprint at the origin
    lr: dict = field(default_factory=_default_lr)
    position_lr_final: float = 2e-5
    mse_weight: float = 1.0
    sds_weight: float = 0.0
    denoiser: str = "oracle"
    sds_t_max: float = 0.98
    sds_t_min: float = 0.02
    densify_every: int = 100
    densify_from: int = 100
    densify_until: float = 0.6  # fraction of total steps
    grad_threshold: float = 2e-4
    scale_threshold: float = 0.01  # fraction of init extent
    opacity_floor: float = 0.005
    view_sampling: str = "round-robin"
    threads: int = 1


@dataclass
class LogRow:
    step: int
    loss: float
    psnr: float
    gaussian_count: int
    wall_ms: float


@dataclass
class StaticFitResult:
    cloud: GaussianCloud
    log: list
    state: TrainState


def default_extent(matrix: ImageMatrix) -> float:
    """Half of the smallest half-width of the view frustum at the origin."""
    intr = matrix.intrinsics
    radius = min(p.radius for p in matrix.views)
    return 0.5 * radius * min(intr.width, intr.height) / (2.0 * intr.focal)


def _lr_at(cfg: StaticConfig, step: int) -> dict:
    lr = dict(cfg.lr)
    frac = min(step / max(cfg.steps, 1), 1.0)
    start, end = cfg.lr["position"], cfg.position_lr_final
    if start > 0 and end > 0:
        lr["position"] = math.exp((1 - frac) * math.log(start) + frac * math.log(end))
    return lr


def fit_static(matrix: ImageMatrix, config: StaticConfig | None = None,
               callback: Callable[[TrainState, LogRow], None] | None = None) -> StaticFitResult:
    """Optimise a cloud against the t = 0 column; returns the cloud and a per-step loss log."""
    cfg = config or StaticConfig()
    if cfg.steps < 0:
        raise InvalidArgumentError("steps must be >= 0")
    if cfg.view_sampling not in ("round-robin", "random"):
        raise InvalidArgumentError(f"unknown view sampling {cfg.view_sampling!r}")
    extent = cfg.init_extent or default_extent(matrix)
    state = TrainState.initial(init_random_cloud(cfg.init_count, extent, cfg.seed), cfg.seed)
    schedule = SdsSchedule(cfg.sds_t_max, cfg.sds_t_min, max(cfg.steps, 1))
    denoiser = None
    if cfg.sds_weight > 0:
        if cfg.denoiser not in DENOISERS:
            raise InvalidArgumentError(f"unknown denoiser {cfg.denoiser!r}; choose from {sorted(DENOISERS)}")
        denoiser = DENOISERS[cfg.denoiser](schedule)
    rng = np.random.default_rng([cfg.seed, 1])
    densify_stop = int(cfg.densify_until * cfg.steps)
    bg = np.asarray(matrix.background)
    intr = matrix.intrinsics
    rows = []
    t0 = time.perf_counter()

    for step in range(cfg.steps):
        if cfg.view_sampling == "round-robin":
            v = step % matrix.num_views
        else:
            v = int(rng.integers(matrix.num_views))
        pose = matrix.views[v]
        target = matrix.cells[v, 0]
        out = render(state.cloud, pose, intr, bg, threads=cfg.threads)
        loss, d_image = mse_loss_and_grad(out.image, target)
        loss *= cfg.mse_weight
        d_image = cfg.mse_weight * d_image
        if denoiser is not None:
            d_image = d_image + cfg.sds_weight * sds_loss_grad(
                out.image, denoiser, schedule, step, target, relative_pose(matrix.views[0], pose),
                seed=int(rng.integers(2**63)))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step} (view {v}, {len(state.cloud)} Gaussians)")
        grads = render_backward(state.cloud, pose, intr, bg, d_image, forward=out, threads=cfg.threads)
        state = accumulate_densify_stats(state, grads)
        state = adam_step(state, grads, _lr_at(cfg, step))
        done = step + 1
        if cfg.densify_every > 0 and done >= cfg.densify_from and done % cfg.densify_every == 0 \
                and done <= densify_stop:
            state = densify_and_prune(state, cfg.grad_threshold, cfg.scale_threshold * extent,
                                      cfg.opacity_floor)
        row = LogRow(done, loss, psnr(out.image, target), len(state.cloud),
                     (time.perf_counter() - t0) * 1000.0)
        rows.append(row)
        if callback is not None:
            callback(state, row)
    return StaticFitResult(state.cloud, rows, state)
