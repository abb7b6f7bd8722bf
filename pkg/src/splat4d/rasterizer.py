"""CPU Gaussian splatting: forward compositing and the analytic backward pass.

Each Gaussian is projected with the EWA linearisation of the pinhole camera,
the image is cut into square tiles, and every tile composites its overlapping
Gaussians front to back. Per-pixel arithmetic is written so that the tiled
path and :func:`render_reference` (a plain per-pixel loop kept as a test
oracle) agree bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, SphericalPose, view_matrix
from .errors import InvalidArgumentError
from .scene import GaussianCloud, quat_to_rotmat, sigmoid

SIGMA_CUTOFF = 3.0
SCREEN_DILATION = 0.3
TRANSMITTANCE_EPS = 1e-4
ALPHA_MAX = 0.9999
DET_EPS = 1e-12
TILE_SIZE = 16

_CUTOFF_SQ = SIGMA_CUTOFF * SIGMA_CUTOFF


@dataclass
class _Projection:
    """Per-Gaussian screen-space quantities, rows in front-to-back order."""

    index: np.ndarray  # row -> cloud index
    u: np.ndarray
    v: np.ndarray
    conic: np.ndarray  # (K, 3): a, b, c of the inverse 2D covariance
    opacity: np.ndarray
    color: np.ndarray  # clamped to [0, 1]
    radius_x: np.ndarray
    radius_y: np.ndarray
    skipped_degenerate: int
    # kept for the backward pass
    view: np.ndarray = None
    xv: np.ndarray = None  # view-space centres (a, b, z)
    quat: np.ndarray = None
    quat_norm: np.ndarray = None
    rot: np.ndarray = None
    scale: np.ndarray = None
    cov3: np.ndarray = None
    jv: np.ndarray = None  # J @ V, (K, 2, 3)
    color_live: np.ndarray = None


@dataclass
class _TileResult:
    rows: np.ndarray  # projection rows overlapping this tile, front to back
    pix: np.ndarray  # flat pixel indices
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray  # exp(power)
    alpha: np.ndarray
    live: np.ndarray  # inside support and not clamped: alpha depends on parameters
    t_before: np.ndarray
    active: np.ndarray
    weight: np.ndarray
    accum: np.ndarray  # inclusive running colour sum, (K, P, 3)
    image: np.ndarray  # (P, 3)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    visibility_count: np.ndarray  # pixels each Gaussian contributed to
    skipped_degenerate: int = 0
    _projection: _Projection | None = field(default=None, repr=False)
    _tiles: list | None = field(default=None, repr=False)


@dataclass
class CloudGradients:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    screen_grad: np.ndarray  # |dL/d(mean2D)| in NDC units
    visibility_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "CloudGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=np.int64))

    def params(self) -> dict[str, np.ndarray]:
        return {"position": self.position, "rotation": self.rotation, "log_scale": self.log_scale,
                "opacity": self.opacity, "color": self.color}

    def __add__(self, other: "CloudGradients") -> "CloudGradients":
        return CloudGradients(
            self.position + other.position, self.rotation + other.rotation,
            self.log_scale + other.log_scale, self.opacity + other.opacity,
            self.color + other.color, self.screen_grad + other.screen_grad,
            self.visibility_count + other.visibility_count)

    def scaled(self, k: float) -> "CloudGradients":
        return CloudGradients(self.position * k, self.rotation * k, self.log_scale * k,
                              self.opacity * k, self.color * k, self.screen_grad,
                              self.visibility_count)


def _check_cloud(cloud: GaussianCloud):
    if len(cloud) == 0:
        raise InvalidArgumentError("cannot render an empty cloud")
    for name, arr in cloud.params().items():
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"non-finite {name} in cloud")


def _project(cloud: GaussianCloud, pose: SphericalPose, intr: CameraIntrinsics) -> _Projection:
    view, centre = view_matrix(pose)
    d = cloud.positions - centre
    # explicit elementwise dot products: the sort key must not depend on row position
    depth = view[2, 0] * d[:, 0] + view[2, 1] * d[:, 1] + view[2, 2] * d[:, 2]
    cand = np.flatnonzero((depth > intr.near) & (depth < intr.far))
    order = cand[np.argsort(depth[cand], kind="stable")]

    d = d[order]
    a = view[0, 0] * d[:, 0] + view[0, 1] * d[:, 1] + view[0, 2] * d[:, 2]
    b = view[1, 0] * d[:, 0] + view[1, 1] * d[:, 1] + view[1, 2] * d[:, 2]
    z = depth[order]
    f = intr.focal

    quat = cloud.rotations[order]
    qnorm = np.sqrt(np.sum(quat * quat, axis=1))
    if np.any(qnorm == 0):
        raise InvalidArgumentError("zero-length quaternion in cloud")
    rot = quat_to_rotmat(quat / qnorm[:, None])
    scale = np.exp(cloud.log_scales[order])
    m = rot * scale[:, None, :]
    cov3 = m @ m.transpose(0, 2, 1)

    k = len(order)
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 0, 2] = -f * a / (z * z)
    jac[:, 1, 1] = f / z
    jac[:, 1, 2] = -f * b / (z * z)
    jv = jac @ view
    cov2 = jv @ cov3 @ jv.transpose(0, 2, 1)
    ca = cov2[:, 0, 0] + SCREEN_DILATION
    cb = cov2[:, 0, 1]
    cc = cov2[:, 1, 1] + SCREEN_DILATION
    det = ca * cc - cb * cb
    ok = det > DET_EPS
    skipped = int(np.count_nonzero(~ok))
    if skipped:
        order, a, b, z, quat, qnorm, rot, scale, cov3, jv = (
            x[ok] for x in (order, a, b, z, quat, qnorm, rot, scale, cov3, jv))
        ca, cb, cc, det = ca[ok], cb[ok], cc[ok], det[ok]

    raw_color = cloud.colors[order]
    return _Projection(
        index=order,
        u=intr.cx + f * a / z,
        v=intr.cy + f * b / z,
        conic=np.stack([cc / det, -cb / det, ca / det], axis=1),
        opacity=sigmoid(cloud.opacity_logits[order]),
        color=np.clip(raw_color, 0.0, 1.0),
        radius_x=SIGMA_CUTOFF * np.sqrt(ca),
        radius_y=SIGMA_CUTOFF * np.sqrt(cc),
        skipped_degenerate=skipped,
        view=view,
        xv=np.stack([a, b, z], axis=1),
        quat=quat,
        quat_norm=qnorm,
        rot=rot,
        scale=scale,
        cov3=cov3,
        jv=jv,
        color_live=(raw_color >= 0.0) & (raw_color <= 1.0),
    )


def _tiles(intr: CameraIntrinsics):
    for y0 in range(0, intr.height, TILE_SIZE):
        for x0 in range(0, intr.width, TILE_SIZE):
            yield x0, y0, min(x0 + TILE_SIZE, intr.width), min(y0 + TILE_SIZE, intr.height)


def _tile_forward(proj: _Projection, intr: CameraIntrinsics, bounds, background) -> _TileResult:
    x0, y0, x1, y1 = bounds
    jj, ii = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    pix = (ii * intr.width + jj).ravel()
    px = jj.ravel() + 0.5
    py = ii.ravel() + 0.5
    # one pixel of slack keeps the binning conservative against rounding at the ellipse edge
    rows = np.flatnonzero(
        (proj.u + proj.radius_x + 1.0 >= x0) & (proj.u - proj.radius_x - 1.0 <= x1)
        & (proj.v + proj.radius_y + 1.0 >= y0) & (proj.v - proj.radius_y - 1.0 <= y1))
    n_pix = px.size
    if rows.size == 0:
        empty = np.zeros((0, n_pix))
        image = np.zeros((n_pix, 3)) + 1.0 * background
        return _TileResult(rows, pix, empty, empty, empty, empty, empty.astype(bool), empty,
                           empty.astype(bool), empty, np.zeros((0, n_pix, 3)), image)

    ca = proj.conic[rows, 0][:, None]
    cb = proj.conic[rows, 1][:, None]
    cc = proj.conic[rows, 2][:, None]
    op = proj.opacity[rows][:, None]
    dx = px[None, :] - proj.u[rows][:, None]
    dy = py[None, :] - proj.v[rows][:, None]
    m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    inside = m2 <= _CUTOFF_SQ
    gauss = np.exp(-0.5 * m2)
    raw_alpha = op * gauss
    alpha = np.where(inside, np.minimum(raw_alpha, ALPHA_MAX), 0.0)
    live = inside & (raw_alpha <= ALPHA_MAX)

    one_minus = 1.0 - alpha
    t_after = np.cumprod(one_minus, axis=0)
    t_before = np.empty_like(t_after)
    t_before[0] = 1.0
    t_before[1:] = t_after[:-1]
    done = t_after < TRANSMITTANCE_EPS
    active = (np.cumsum(done, axis=0) - done) == 0
    t_final = np.cumprod(np.where(active, one_minus, 1.0), axis=0)[-1]
    weight = np.where(active, alpha * t_before, 0.0)
    accum = np.cumsum(weight[:, :, None] * proj.color[rows][:, None, :], axis=0)
    image = accum[-1] + t_final[:, None] * background
    return _TileResult(rows, pix, dx, dy, gauss, alpha, live, t_before, active, weight, accum, image)


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def render(cloud: GaussianCloud, pose: SphericalPose, intrinsics: CameraIntrinsics,
           background, threads: int = 1) -> RenderOutput:
    """Render ``cloud`` from ``pose``; returns the image plus what the backward pass needs.

    Output is bit-identical for any ``threads`` value and any permutation of
    the cloud (up to exact depth ties).
    """
    _check_cloud(cloud)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    proj = _project(cloud, pose, intrinsics)
    bounds = list(_tiles(intrinsics))
    tiles = _map(lambda bnd: _tile_forward(proj, intrinsics, bnd, background), bounds, threads)

    h, w = intrinsics.height, intrinsics.width
    flat = np.empty((h * w, 3))
    visibility = np.zeros(len(cloud), dtype=np.int64)
    for tile in tiles:
        flat[tile.pix] = tile.image
        if tile.rows.size:
            seen = np.count_nonzero(tile.active & (tile.alpha > 0.0), axis=1)
            np.add.at(visibility, proj.index[tile.rows], seen)
    return RenderOutput(flat.reshape(h, w, 3), visibility, proj.skipped_degenerate, proj, tiles)


def render_reference(cloud: GaussianCloud, pose: SphericalPose, intrinsics: CameraIntrinsics,
                     background) -> np.ndarray:
    """Per-pixel loop over all projected Gaussians; slow, used to validate the tiled path."""
    _check_cloud(cloud)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    proj = _project(cloud, pose, intrinsics)
    h, w = intrinsics.height, intrinsics.width
    image = np.empty((h, w, 3))
    u, v, conic, opacity, color = proj.u, proj.v, proj.conic, proj.opacity, proj.color
    for i in range(h):
        py = np.float64(i) + 0.5
        for j in range(w):
            px = np.float64(j) + 0.5
            c = [np.float64(0.0)] * 3
            t = np.float64(1.0)
            for k in range(len(u)):
                dx = px - u[k]
                dy = py - v[k]
                m2 = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                if not m2 <= _CUTOFF_SQ:
                    continue
                alpha = min(opacity[k] * np.exp(-0.5 * m2), ALPHA_MAX)
                wgt = alpha * t
                c = [c[ch] + wgt * color[k, ch] for ch in range(3)]
                t = t * (1.0 - alpha)
                if t < TRANSMITTANCE_EPS:
                    break
            image[i, j] = [c[ch] + t * background[ch] for ch in range(3)]
    return image


def compositing_weights(out: RenderOutput) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel sum of Gaussian blending weights and the background weight."""
    n = out.image.shape[0] * out.image.shape[1]
    splat = np.zeros(n)
    for tile in out._tiles:
        if tile.rows.size:
            splat[tile.pix] = tile.weight.sum(axis=0)
    bg = np.ones(n)
    for tile in out._tiles:
        if tile.rows.size:
            bg[tile.pix] = np.cumprod(np.where(tile.active, 1.0 - tile.alpha, 1.0), axis=0)[-1]
    shape = out.image.shape[:2]
    return splat.reshape(shape), bg.reshape(shape)


def _tile_backward(proj: _Projection, tile: _TileResult, d_flat: np.ndarray):
    """Per-row partial sums for one tile: du, dv, d_conic(3), d_opacity, d_color(3)."""
    d_img = d_flat[tile.pix]  # (P, 3)
    col = proj.color[tile.rows]
    d_col_dot = col @ d_img.T  # (K, P): dI . c_k
    d_img_dot = np.sum(d_img * tile.image, axis=1)  # dI . final
    d_acc_dot = np.einsum("kpc,pc->kp", tile.accum, d_img)
    # colour behind row k, including background: final - inclusive running sum
    d_behind = d_img_dot[None, :] - d_acc_dot
    d_alpha = np.where(tile.active, tile.t_before * d_col_dot - d_behind / (1.0 - tile.alpha), 0.0)
    d_alpha = np.where(tile.live, d_alpha, 0.0)

    d_color = tile.weight @ d_img
    d_opacity = np.sum(d_alpha * tile.gauss, axis=1)
    d_power = d_alpha * tile.alpha
    dx, dy = tile.dx, tile.dy
    ca = proj.conic[tile.rows, 0][:, None]
    cb = proj.conic[tile.rows, 1][:, None]
    cc = proj.conic[tile.rows, 2][:, None]
    du = np.sum(d_power * (ca * dx + cb * dy), axis=1)
    dv = np.sum(d_power * (cb * dx + cc * dy), axis=1)
    d_ca = np.sum(d_power * (-0.5 * dx * dx), axis=1)
    d_cb = np.sum(d_power * (-dx * dy), axis=1)
    d_cc = np.sum(d_power * (-0.5 * dy * dy), axis=1)
    return np.column_stack([du, dv, d_ca, d_cb, d_cc, d_opacity, d_color])


def _quat_rotmat_backward(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion given dL/dR."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def render_backward(cloud: GaussianCloud, pose: SphericalPose, intrinsics: CameraIntrinsics,
                    background, d_image: np.ndarray, forward: RenderOutput | None = None,
                    threads: int = 1) -> CloudGradients:
    """Exact gradient of ``<d_image, render(...)>`` w.r.t. every Gaussian parameter.

    Pass the matching ``forward`` output to skip recomputing the forward pass.
    Rotation gradients are taken w.r.t. the raw (unnormalised) quaternion.
    """
    h, w = intrinsics.height, intrinsics.width
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise InvalidArgumentError(f"d_image has shape {d_image.shape}, expected {(h, w, 3)}")
    if forward is None:
        forward = render(cloud, pose, intrinsics, background, threads=threads)
    proj, tiles = forward._projection, forward._tiles
    n = len(cloud)
    grads = CloudGradients.zeros(n)
    grads.visibility_count = forward.visibility_count.copy()
    k = len(proj.index)
    if k == 0:
        return grads

    d_flat = d_image.reshape(-1, 3)
    busy = [t for t in tiles if t.rows.size]
    partials = _map(lambda t: _tile_backward(proj, t, d_flat), busy, threads)
    acc = np.zeros((k, 9))
    for tile, part in zip(busy, partials):
        np.add.at(acc, tile.rows, part)
    du, dv, d_ca, d_cb, d_cc, d_op = (acc[:, i] for i in range(6))
    d_col = acc[:, 6:9]

    f = intrinsics.focal
    view = proj.view
    a, b, z = proj.xv[:, 0], proj.xv[:, 1], proj.xv[:, 2]
    conic = np.empty((k, 2, 2))
    conic[:, 0, 0] = proj.conic[:, 0]
    conic[:, 0, 1] = conic[:, 1, 0] = proj.conic[:, 1]
    conic[:, 1, 1] = proj.conic[:, 2]
    g_conic = np.empty((k, 2, 2))
    g_conic[:, 0, 0] = d_ca
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_cb
    g_conic[:, 1, 1] = d_cc
    g_cov2 = -conic @ g_conic @ conic
    jv, cov3 = proj.jv, proj.cov3
    g_cov3 = jv.transpose(0, 2, 1) @ g_cov2 @ jv
    g_jv = 2.0 * g_cov2 @ jv @ cov3
    g_jac = g_jv @ view.T

    z2 = z * z
    z3 = z2 * z
    g_a = du * f / z - g_jac[:, 0, 2] * f / z2
    g_b = dv * f / z - g_jac[:, 1, 2] * f / z2
    g_z = (-du * f * a / z2 - dv * f * b / z2 - (g_jac[:, 0, 0] + g_jac[:, 1, 1]) * f / z2
           + 2.0 * f * (g_jac[:, 0, 2] * a + g_jac[:, 1, 2] * b) / z3)
    g_pos = np.stack([g_a, g_b, g_z], axis=1) @ view

    m = proj.rot * proj.scale[:, None, :]
    g_m = 2.0 * g_cov3 @ m
    g_scale = np.sum(g_m * proj.rot, axis=1)
    g_rot = g_m * proj.scale[:, None, :]
    qn = proj.quat / proj.quat_norm[:, None]
    g_qn = _quat_rotmat_backward(qn, g_rot)
    g_quat = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / proj.quat_norm[:, None]

    idx = proj.index
    grads.position[idx] = g_pos
    grads.rotation[idx] = g_quat
    grads.log_scale[idx] = g_scale * proj.scale
    grads.opacity[idx] = d_op * proj.opacity * (1.0 - proj.opacity)
    grads.color[idx] = np.where(proj.color_live, d_col, 0.0)
    grads.screen_grad[idx] = np.hypot(du * (0.5 * w), dv * (0.5 * h))
    return grads
