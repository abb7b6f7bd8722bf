import json

import numpy as np
import pytest

from splat4d.camera import CameraIntrinsics, SphericalPose, matrix_rig
from splat4d.errors import InvalidArgumentError, SchemaError
from splat4d.image_matrix import load_matrix, save_matrix, synthesize_matrix
from splat4d.io import write_png
from splat4d.rasterizer import render
from splat4d.scene import evaluate_scene, make_preset

INTR = CameraIntrinsics(24, 20, 26.0)


def small(preset="rigid-translate", views=3, times=(0.0, 0.5, 1.0), **kw):
    spec = make_preset(preset, count=15, seed=1)
    return spec, synthesize_matrix(spec, matrix_rig(views, 0.3, 2.5), times, INTR, **kw)


def test_static_scene_columns_identical():
    _, m = small("static-blob")
    for v in range(m.num_views):
        for t in range(1, m.num_times):
            assert np.array_equal(m.cells[v, 0], m.cells[v, t])


def test_one_by_one_is_a_render():
    spec = make_preset("static-blob", count=10)
    pose = SphericalPose(1.2, 0.5, 2.5)
    m = synthesize_matrix(spec, [pose], [0.0], INTR)
    assert m.cells.shape[:2] == (1, 1)
    assert np.array_equal(m.cells[0, 0], render(spec.base, pose, INTR, spec.background_color).image)


def test_translation_changes_exactly_the_footprint():
    spec, m = small(views=1, times=(0.0, 1.0))
    pose = m.views[0]
    changed = np.any(m.cells[0, 0] != m.cells[0, 1], axis=2)
    covered = np.zeros_like(changed)
    for t in (0.0, 1.0):
        out = render(evaluate_scene(spec, t), pose, INTR, spec.background_color)
        covered |= np.any(out.image != np.asarray(spec.background_color), axis=2)
    assert changed.any()
    assert not np.any(changed & ~covered)


def test_matrix_deterministic():
    assert np.array_equal(small(noise_sigma=0.05, seed=3)[1].cells, small(noise_sigma=0.05, seed=3)[1].cells)


@pytest.mark.parametrize("times", [[0.1, 0.5], [0.0, 0.5, 0.5], [0.0, 1.2], []])
def test_bad_times(times):
    with pytest.raises(InvalidArgumentError):
        small(times=times)


def test_cell_order_is_row_major():
    _, m = small(views=2, times=(0.0, 1.0))
    assert m.cell_indices() == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_roundtrip(tmp_path):
    spec = make_preset("rigid-spin", count=15, seed=1)
    m = synthesize_matrix(spec, matrix_rig(4, 0.3, 2.5), [0.0, 0.3, 0.6, 1.0], INTR)
    save_matrix(m, tmp_path)
    back = load_matrix(tmp_path / "manifest.json")
    assert back.views == m.views
    assert np.array_equal(back.times, m.times)
    assert np.max(np.abs(back.cells - m.cells)) <= 1 / 255
    assert back.intrinsics == m.intrinsics and back.background == m.background


def test_view_count_mismatch(tmp_path):
    _, m = small()
    save_matrix(m, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["views"] = manifest["views"][:2]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SchemaError, match="3 views but 2 pose"):
        load_matrix(tmp_path)


def test_missing_cell_named(tmp_path):
    _, m = small()
    save_matrix(m, tmp_path)
    (tmp_path / "cells" / "v001_t002.png").unlink()
    with pytest.raises(SchemaError, match=r"v=1, t=2"):
        load_matrix(tmp_path)


def test_wrong_cell_size_named(tmp_path):
    _, m = small()
    save_matrix(m, tmp_path)
    write_png(np.zeros((5, 5, 3)), tmp_path / "cells" / "v000_t001.png")
    with pytest.raises(SchemaError, match=r"v=0, t=1"):
        load_matrix(tmp_path)


def test_non_monotone_times_in_manifest(tmp_path):
    _, m = small()
    save_matrix(m, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["times"] = [0.0, 1.0, 0.5]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SchemaError):
        load_matrix(tmp_path)


def test_hand_written_manifest(tmp_path):
    """A manifest authored without the library, with hand-placed poses."""
    (tmp_path / "cells").mkdir()
    manifest = {
        "schema_version": 1, "width": 16, "height": 12, "focal": 18.0, "near": 0.1, "far": 50.0,
        "background": [1.0, 1.0, 1.0],
        "views": [{"theta": 1.5707963267948966, "phi": 0.0, "radius": 2.0},
                  {"theta": 1.2, "phi": 3.14159, "radius": 2.5}],
        "times": [0.0, 1.0],
        "cell_template": "cells/v{v:03d}_t{t:03d}.png",
    }
    rng = np.random.default_rng(0)
    for v in range(2):
        for t in range(2):
            write_png(rng.uniform(size=(12, 16, 3)), tmp_path / f"cells/v{v:03d}_t{t:03d}.png")
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    m = load_matrix(tmp_path)
    assert (m.num_views, m.num_times) == (2, 2)
    assert m.views[1].phi == 3.14159
    spec = make_preset("static-blob", count=5)
    assert render(spec.base, m.views[1], m.intrinsics, m.background).image.shape == m.cells[1, 0].shape
