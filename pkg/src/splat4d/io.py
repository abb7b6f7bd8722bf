"""File formats: splat PLY, 8-bit PNG and binary checkpoints.

All multi-byte values are little-endian. Writers need exclusive access to
their target path; readers may run concurrently.

Checkpoint layout (both kinds)::

    magic      8 bytes   b"MVG4DFLD" (deformation field) or b"MVG4DTRS" (train state)
    version    u32
    header     u32 / f32 / u64 fields, listed per writer below
    payload    raw arrays, C order, in the documented sequence
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, InvalidArgumentError, StorageError
from .scene import GaussianCloud

SH_C0 = 0.28209479177387814

PLY_PROPERTIES = (
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
)
_PLY_DTYPE = np.dtype([(name, "<f4") for name in PLY_PROPERTIES])


# --- PLY -----------------------------------------------------------------------

def export_ply(cloud: GaussianCloud) -> bytes:
    """Binary little-endian PLY in the usual splat interchange layout (f32 values)."""
    n = len(cloud)
    if n == 0:
        raise InvalidArgumentError("cannot export an empty cloud")
    rec = np.zeros(n, dtype=_PLY_DTYPE)
    for i, axis in enumerate("xyz"):
        rec[axis] = cloud.positions[:, i]
    for i in range(3):
        rec[f"f_dc_{i}"] = (cloud.colors[:, i] - 0.5) / SH_C0
        rec[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i]
    rec["opacity"] = cloud.opacity_logits
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def import_ply(data: bytes) -> GaussianCloud:
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file or header not terminated", 0)
    offset = 0
    count = None
    props = []
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        words = line.split()
        if words[:1] == ["format"]:
            if words[1:2] != ["binary_little_endian"]:
                raise FormatError(f"unsupported PLY format {' '.join(words[1:])!r} "
                                  "(only binary_little_endian)", offset)
        elif words[:2] == ["element", "vertex"]:
            try:
                count = int(words[2])
            except (IndexError, ValueError):
                raise FormatError(f"bad vertex count line {line!r}", offset) from None
        elif words[:1] == ["element"]:
            raise FormatError(f"unexpected element {line!r}", offset)
        elif words[:1] == ["property"]:
            if len(words) != 3 or words[1] != "float":
                raise FormatError(f"unsupported property declaration {line!r}", offset)
            props.append((words[2], offset))
        offset += len(raw) + 1
    if count is None:
        raise FormatError("missing vertex element", 0)
    names = tuple(name for name, _ in props)
    if names != PLY_PROPERTIES:
        bad = next((i for i, (a, b) in enumerate(zip(names, PLY_PROPERTIES)) if a != b), min(len(names), 16))
        where = props[bad][1] if bad < len(props) else end
        raise FormatError(f"property order {list(names)} does not match the splat layout", where)
    body = end + len(marker)
    need = count * _PLY_DTYPE.itemsize
    if len(data) - body < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(data) - body}", len(data))
    if len(data) - body > need:
        raise FormatError("trailing bytes after vertex payload", body + need)
    if count == 0:
        raise FormatError("PLY holds no Gaussians", body)
    rec = np.frombuffer(data, dtype=_PLY_DTYPE, count=count, offset=body)

    def cols(names):
        return np.stack([rec[n].astype(np.float64) for n in names], axis=1)

    dc = cols(["f_dc_0", "f_dc_1", "f_dc_2"])
    return GaussianCloud(
        positions=cols("xyz"),
        rotations=cols([f"rot_{i}" for i in range(4)]),
        log_scales=cols([f"scale_{i}" for i in range(3)]),
        opacity_logits=rec["opacity"].astype(np.float64),
        colors=dc * SH_C0 + 0.5,
    )


def save_ply(cloud: GaussianCloud, path) -> None:
    _write_bytes(path, export_ply(cloud))


def load_ply(path) -> GaussianCloud:
    return import_ply(_read_bytes(path))


# --- PNG -----------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected an HxWx3 image, got shape {image.shape}")
    try:
        Image.fromarray(quantize(image), mode="RGB").save(Path(path), format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(Path(path)) as im:
            if im.format != "PNG" or im.mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB PNG, got {im.format} {im.mode}")
            return np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise StorageError(f"missing file {path}") from exc
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not an image") from exc
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


# --- checkpoints ---------------------------------------------------------------

FIELD_MAGIC = b"MVG4DFLD"
STATE_MAGIC = b"MVG4DTRS"
FIELD_VERSION = 1
STATE_VERSION = 1


def _unpack(fmt: str, data: bytes, offset: int):
    size = struct.calcsize(fmt)
    if len(data) < offset + size:
        raise FormatError("truncated checkpoint header", len(data))
    return struct.unpack_from(fmt, data, offset), offset + size


def _check_magic(data: bytes, magic: bytes, version: int) -> int:
    if data[:8] != magic:
        raise FormatError(f"bad magic {data[:8]!r}, expected {magic!r}", 0)
    (found,), offset = _unpack("<I", data, 8)
    if found != version:
        raise FormatError(f"unsupported checkpoint version {found} (reader supports {version})", 8)
    return offset


def _read_arrays(data: bytes, offset: int, shapes, dtype: str) -> list[np.ndarray]:
    out = []
    item = np.dtype(dtype).itemsize
    for shape in shapes:
        n = int(np.prod(shape))
        if len(data) < offset + n * item:
            raise FormatError("truncated checkpoint payload", len(data))
        out.append(np.frombuffer(data, dtype=dtype, count=n, offset=offset)
                   .astype(np.float64).reshape(shape))
        offset += n * item
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint payload", offset)
    return out


def export_field(field) -> bytes:
    """Deformation-field checkpoint.

    Header after magic/version: u32 base_resolution, u32 levels, u32 features,
    u32 hidden_width, u32 head_flags (bit0 position, bit1 rotation, bit2 scale),
    f32 extent. Payload (f32): for each level, the six planes (xy, xz, yz, xt,
    yt, zt) each shaped (res, res, features); then w1, b1, w2, b2, and the
    position, rotation and scale heads (weight then bias).
    """
    from .deformation import HEAD_NAMES

    enc, dec = field.encoder, field.decoder
    flags = sum(1 << i for i, name in enumerate(HEAD_NAMES) if dec.enabled[name])
    head = FIELD_MAGIC + struct.pack("<IIIIIIf", FIELD_VERSION, enc.base_resolution, enc.levels,
                                     enc.features, dec.hidden, flags, enc.extent)
    arrays = [p for level in enc.planes for p in level] + dec.arrays()
    return head + b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def import_field(data: bytes):
    from .deformation import HEAD_NAMES, DeformationField, MicroMlp, PlaneEncoder

    offset = _check_magic(data, FIELD_MAGIC, FIELD_VERSION)
    (res, levels, feats, hidden, flags, extent), offset = _unpack("<IIIIIf", data, offset)
    if res < 2 or levels < 1 or feats < 1 or hidden < 1 or not np.isfinite(extent) or extent <= 0:
        raise FormatError(f"invalid field dimensions {(res, levels, feats, hidden, extent)}", 12)
    enabled = {name: bool(flags >> i & 1) for i, name in enumerate(HEAD_NAMES)}
    plane_shapes = [(res << lvl, res << lvl, feats) for lvl in range(levels) for _ in range(6)]
    mlp_shapes = MicroMlp.shapes(levels * feats, hidden)
    arrays = _read_arrays(data, offset, plane_shapes + mlp_shapes, "<f4")
    planes = [arrays[6 * lvl:6 * lvl + 6] for lvl in range(levels)]
    encoder = PlaneEncoder(planes, float(extent))
    decoder = MicroMlp.from_arrays(arrays[6 * levels:], enabled)
    return DeformationField(encoder, decoder)


def save_field(field, path) -> None:
    _write_bytes(path, export_field(field))


def load_field(path):
    return import_field(_read_bytes(path))


def export_train_state(state) -> bytes:
    """Static-fit checkpoint, full f64 so a resumed run continues bit-exactly.

    Header after magic/version: u32 count, u64 step, u64 rng_seed. Payload
    (f64): cloud params (position, rotation, log_scale, opacity, color), then
    Adam first moments and second moments in the same order, then the
    densification gradient sums and observation counts.
    """
    n = len(state.cloud)
    head = STATE_MAGIC + struct.pack("<IIQQ", STATE_VERSION, n, state.step, state.rng_seed)
    arrays = list(state.cloud.params().values())
    arrays += [state.moment1[k] for k in state.cloud.params()]
    arrays += [state.moment2[k] for k in state.cloud.params()]
    arrays += [state.grad_accum, state.grad_count]
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def import_train_state(data: bytes):
    from .static_fit import PARAM_SHAPES, TrainState

    offset = _check_magic(data, STATE_MAGIC, STATE_VERSION)
    (n, step, seed), offset = _unpack("<IQQ", data, offset)
    shapes = [(n,) + s for s in PARAM_SHAPES.values()]
    arrays = _read_arrays(data, offset, shapes * 3 + [(n,), (n,)], "<f8")
    names = list(PARAM_SHAPES)
    cloud = GaussianCloud.from_params(dict(zip(names, arrays[0:5])))
    return TrainState(cloud, dict(zip(names, arrays[5:10])), dict(zip(names, arrays[10:15])),
                      step, arrays[15], arrays[16], seed)


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


read_bytes = _read_bytes


def save_train_state(state, path) -> None:
    _write_bytes(path, export_train_state(state))


def load_train_state(path):
    return import_train_state(_read_bytes(path))
