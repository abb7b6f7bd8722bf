import struct

import numpy as np
import pytest
from PIL import Image

from fd_oracle import random_field
from splat4d.deformation import to_float32
from splat4d.errors import FormatError, InvalidArgumentError, StorageError
from splat4d.io import (
    FIELD_MAGIC,
    PLY_PROPERTIES,
    export_field,
    export_ply,
    export_train_state,
    import_field,
    import_ply,
    import_train_state,
    quantize,
    read_png,
    write_png,
)
from splat4d.scene import GaussianCloud, random_scene_cloud
from splat4d.static_fit import TrainState


def test_ply_roundtrip():
    cloud = random_scene_cloud(100, 0.8, seed=1)
    back = import_ply(export_ply(cloud))
    for k, v in cloud.params().items():
        assert np.max(np.abs(back.params()[k] - v)) <= 1e-6, k
    # f32-exact: what comes back is exactly the f32 rounding of each stored value
    np.testing.assert_array_equal(back.positions, cloud.positions.astype(np.float32))
    assert export_ply(back) == export_ply(cloud)


def test_ply_mid_gray_is_zero_dc():
    cloud = GaussianCloud(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.zeros((1, 3)), np.zeros(1),
                          np.full((1, 3), 0.5))
    data = export_ply(cloud)
    rec = np.frombuffer(data[data.index(b"end_header\n") + 11:], dtype="<f4")
    assert rec[PLY_PROPERTIES.index("f_dc_0")] == 0.0
    assert np.all(import_ply(data).colors == 0.5)


def test_ply_empty_cloud_rejected():
    with pytest.raises(InvalidArgumentError):
        export_ply(random_scene_cloud(3, 1.0, 0).take([]))


def _good():
    return export_ply(random_scene_cloud(4, 0.5, seed=2))


def test_ply_ascii_rejected():
    data = _good().replace(b"binary_little_endian", b"ascii")
    with pytest.raises(FormatError, match="byte offset 4"):
        import_ply(data)


def test_ply_property_order():
    data = _good().replace(b"property float x\nproperty float y", b"property float y\nproperty float x")
    with pytest.raises(FormatError, match="byte offset"):
        import_ply(data)


def test_ply_truncated_and_trailing():
    data = _good()
    with pytest.raises(FormatError, match="truncated"):
        import_ply(data[:-5])
    with pytest.raises(FormatError, match="trailing"):
        import_ply(data + b"\0\0\0\0")
    with pytest.raises(FormatError):
        import_ply(b"garbage")


def test_png_quantization(tmp_path):
    write_png(np.full((3, 4, 3), 0.5), tmp_path / "g.png")
    assert np.all(np.asarray(Image.open(tmp_path / "g.png")) == 128)
    assert quantize(np.array([1.5, -0.2, 1 / 255])).tolist() == [255, 0, 1]


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(17, 9, 3))
    write_png(img, tmp_path / "r.png")
    assert np.max(np.abs(read_png(tmp_path / "r.png") - img)) <= 1 / 255


def test_png_errors(tmp_path):
    Image.new("L", (4, 4)).save(tmp_path / "gray.png")
    with pytest.raises(FormatError):
        read_png(tmp_path / "gray.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        read_png(tmp_path / "junk.png")
    with pytest.raises(StorageError):
        read_png(tmp_path / "missing.png")
    with pytest.raises(StorageError):
        write_png(np.zeros((2, 2, 3)), tmp_path / "no" / "such" / "dir.png")


def test_field_roundtrip_bit_exact():
    f = random_field(3)
    data = export_field(f)
    back = import_field(data)
    assert export_field(back) == data
    exact = to_float32(f)
    for k, v in exact.params().items():
        assert np.array_equal(back.params()[k], v), k
    assert back.encoder.extent == exact.encoder.extent
    assert back.decoder.enabled == f.decoder.enabled


def test_field_head_flags_survive():
    f = random_field(4)
    f.decoder.enabled["scale"] = False
    assert import_field(export_field(f)).decoder.enabled == {"position": True, "rotation": True, "scale": False}


def test_field_corruption():
    data = export_field(random_field(5))
    with pytest.raises(FormatError, match="magic"):
        import_field(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError, match="version"):
        import_field(FIELD_MAGIC + struct.pack("<I", 99) + data[12:])
    with pytest.raises(FormatError, match="truncated"):
        import_field(data[:-3])
    with pytest.raises(FormatError, match="trailing"):
        import_field(data + b"\0" * 4)
    with pytest.raises(FormatError, match="truncated"):
        import_field(data[:15])


def test_train_state_roundtrip_exact():
    cloud = random_scene_cloud(7, 0.5, seed=6)
    rng = np.random.default_rng(0)
    state = TrainState.initial(cloud, rng_seed=42)
    state.moment1["position"][...] = rng.normal(size=(7, 3))
    state.moment2["color"][...] = rng.uniform(size=(7, 3))
    back = import_train_state(export_train_state(state))
    assert back.cloud.equals(cloud) and back.step == state.step and back.rng_seed == 42
    for k in state.moment1:
        assert np.array_equal(back.moment1[k], state.moment1[k])
        assert np.array_equal(back.moment2[k], state.moment2[k])
    with pytest.raises(FormatError):
        import_train_state(export_train_state(state)[:-1])
