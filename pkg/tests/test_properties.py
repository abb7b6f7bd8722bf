import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from fd_oracle import random_scene
from splat4d.camera import SphericalPose, apply_relative, relative_pose, to_world_from_camera, wrap_angle
from splat4d.deformation import DeformationField, deform
from splat4d.io import export_ply, import_ply, quantize
from splat4d.metrics import GaussianFit, frechet_distance, psnr, sequence_indices
from splat4d.rasterizer import CloudGradients, compositing_weights, render
from splat4d.scene import RigidMotion, AnimatedSceneSpec, evaluate_scene, init_random_cloud, random_scene_cloud
from splat4d.static_fit import TrainState, adam_step

FAST = settings(max_examples=60, deadline=None)

angle = st.floats(-20, 20, allow_nan=False)
poses = st.builds(SphericalPose, st.floats(0, math.pi), st.floats(0, 2 * math.pi), st.floats(0.05, 50))
seeds = st.integers(0, 2**32 - 1)


@FAST
@given(angle)
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert abs(math.remainder(w - a, 2 * math.pi)) < 1e-9


@FAST
@given(poses, poses)
def test_relative_roundtrip(a, b):
    c = apply_relative(a, relative_pose(a, b))
    assert abs(c.theta - b.theta) < 1e-9 and abs(c.radius - b.radius) < 1e-9
    assert abs(wrap_angle(c.phi - b.phi)) < 1e-9


@FAST
@given(poses)
def test_camera_is_rigid(p):
    r = to_world_from_camera(p).rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-9) and abs(np.linalg.det(r) - 1) < 1e-9


@FAST
@given(seeds, st.floats(0, 1), st.floats(-3, 3), st.floats(-2, 2))
def test_rigid_motion_preserves_distances(seed, t, speed, vx):
    base = random_scene_cloud(12, 0.5, seed % 1000)
    axis = np.random.default_rng(seed).normal(size=3)
    motion = RigidMotion.linear(velocity=(vx, 0.3, -0.1), angular_speed=speed, axis=tuple(axis / np.linalg.norm(axis)),
                                pivot=(0.1, -0.2, 0.3))
    moved = evaluate_scene(AnimatedSceneSpec(base, (motion,)), t)
    d0 = np.linalg.norm(base.positions[:, None] - base.positions[None], axis=2)
    d1 = np.linalg.norm(moved.positions[:, None] - moved.positions[None], axis=2)
    assert np.max(np.abs(d0 - d1)) < 1e-6


@FAST
@given(st.integers(1, 50), st.floats(0.01, 10), seeds)
def test_init_is_pure(n, extent, seed):
    assert init_random_cloud(n, extent, seed).equals(init_random_cloud(n, extent, seed))


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 20))
def test_render_permutation_and_weights(seed, count):
    cloud, pose, intr, bg, _ = random_scene(seed % 100_000, count=count, size=24)
    perm = np.random.default_rng(seed).permutation(count)
    out = render(cloud, pose, intr, bg)
    assert np.array_equal(out.image, render(cloud.take(perm), pose, intr, bg).image)
    splat, back = compositing_weights(out)
    assert np.max(np.abs(splat + back - 1)) < 1e-6
    assert np.all(out.image >= 0) and np.all(out.image <= 1)


@FAST
@given(seeds)
def test_ply_roundtrip_any_cloud(seed):
    cloud = random_scene_cloud(1 + seed % 30, 1.0, seed)
    back = import_ply(export_ply(cloud))
    for k, v in cloud.params().items():
        assert np.max(np.abs(back.params()[k] - v)) <= 1e-6


@FAST
@given(st.lists(st.floats(-2, 3, allow_nan=False), min_size=1, max_size=30))
def test_quantize_bound(values):
    x = np.array(values)
    assert np.all(np.abs(quantize(x) / 255.0 - np.clip(x, 0, 1)) <= 0.5 / 255 + 1e-12)


@FAST
@given(seeds, st.floats(0, 1))
def test_zero_field_identity(seed, t):
    cloud = random_scene_cloud(8, 0.6, seed % 1000)
    f = DeformationField.create(0.7, base_resolution=4, levels=2, features=2, hidden=4, seed=seed % 1000)
    assert deform(f, cloud, t).equals(cloud)


@FAST
@given(st.integers(1, 7), st.integers(1, 7))
def test_sequence_sizes(v, t):
    assert [len(s) for s in sequence_indices(v, t, "per-view")] == [t] * v
    assert [len(s) for s in sequence_indices(v, t, "diagonal")] == [min(v, t)]
    raster = sequence_indices(v, t, "bidirectional-raster")[0]
    assert sorted(raster) == [(i, j) for i in range(v) for j in range(t)]


@FAST
@given(seeds)
def test_metric_symmetries(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    assert psnr(a, b) == psnr(b, a)
    m1, m2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    p = GaussianFit(rng.normal(size=3), m1 @ m1.T + 0.01 * np.eye(3))
    q = GaussianFit(rng.normal(size=3), m2 @ m2.T + 0.01 * np.eye(3))
    assert frechet_distance(p, q) >= 0
    assert abs(frechet_distance(p, q) - frechet_distance(q, p)) < 1e-8 * max(1.0, frechet_distance(p, q))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_adam_keeps_unit_quaternions(seed):
    rng = np.random.default_rng(seed)
    cloud = random_scene_cloud(6, 0.5, seed % 1000)
    state = TrainState.initial(cloud)
    for _ in range(5):
        g = CloudGradients.zeros(6)
        g.rotation = rng.normal(size=(6, 4))
        g.position = rng.normal(size=(6, 3))
        state = adam_step(state, g, {"rotation": 0.1, "position": 0.01})
    assert np.max(np.abs(np.linalg.norm(state.cloud.rotations, axis=1) - 1)) < 1e-6
    assert state.step == 5
