"""On-disk formats: volume files, checkpoints, scene documents and PLY export.

Volume file layout (all little-endian)::

    offset  size  field
    0       4     magic b"SFVX"
    4       2     uint16 version (1)
    6       1     uint8 payload kind (0 tsdf, 1 datacost, 2 labels, 3 confidence, 4 features)
    7       1     reserved (0)
    8       24    float64[3] grid origin (meters)
    32      8     float64 voxel size (meters)
    40      12    uint32[3] dims (nx, ny, nz)
    52      4     uint32 channel count C
    56      4     uint32 name count K
    60      ...   K names, each uint16 byte length + UTF-8 bytes
    ...     ...   float32 payload, C blocks of nx*ny*nz values, x fastest

Label volumes store integer ids as floats (``-1`` = unknown).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import jsonschema
import numpy as np

from ..geometry import VoxelGridSpec

MAGIC = b"SFVX"
VERSION = 1
KINDS = ("tsdf", "datacost", "labels", "confidence", "features")
_HEADER = struct.Struct("<4sHBB3dd3III")

CKPT_MAGIC = b"SFCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


@dataclasses.dataclass
class VolumeFile:
    kind: str
    spec: VoxelGridSpec
    data: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.shape[1:] != self.spec.dims:
            raise ValueError(f"payload {data.shape} does not match dims {self.spec.dims}")
        self.data = data
        self.names = tuple(self.names)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC,
            VERSION,
            KINDS.index(self.kind),
            0,
            *map(float, self.spec.origin),
            float(self.spec.voxel_size),
            *self.spec.dims,
            self.channels,
            len(self.names),
        )
        names = b"".join(
            struct.pack("<H", len(n.encode())) + n.encode() for n in self.names
        )
        # x fastest within each channel: Fortran order over (x, y, z)
        payload = b"".join(
            np.asfortranarray(c).astype("<f4").tobytes(order="F") for c in self.data
        )
        return head + names + payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> VolumeFile:
        if len(buf) < 4 or buf[:4] != MAGIC:
            raise FormatError("bad magic", 0)
        if len(buf) < _HEADER.size:
            raise FormatError("truncated header", len(buf))
        magic, version, kind, _, ox, oy, oz, vs, nx, ny, nz, channels, n_names = _HEADER.unpack_from(buf)
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {version}", 4)
        if kind >= len(KINDS):
            raise FormatError(f"unknown payload kind {kind}", 6)
        pos = _HEADER.size
        names = []
        for _ in range(n_names):
            if pos + 2 > len(buf):
                raise FormatError("truncated name table", pos)
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n > len(buf):
                raise FormatError("truncated name", pos)
            names.append(buf[pos : pos + n].decode())
            pos += n
        count = nx * ny * nz
        need = pos + 4 * count * channels
        if len(buf) < need:
            raise FormatError(f"truncated payload: expected {need} bytes, got {len(buf)}", len(buf))
        if len(buf) > need:
            raise FormatError("trailing bytes after payload", need)
        flat = np.frombuffer(buf, dtype="<f4", count=count * channels, offset=pos)
        data = flat.reshape(channels, nz, ny, nx).transpose(0, 3, 2, 1).astype(np.float32)
        spec = VoxelGridSpec(np.array([ox, oy, oz]), vs, (nx, ny, nz))
        return cls(KINDS[kind], spec, data, tuple(names))


def save_volume(path, vol: VolumeFile) -> None:
    Path(path).write_bytes(vol.to_bytes())


def load_volume(path) -> VolumeFile:
    return VolumeFile.from_bytes(Path(path).read_bytes())


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Deterministic container: JSON header (sorted keys) + raw float64 arrays."""
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        a = np.asarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)) + header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 10:
        raise FormatError("truncated checkpoint header", len(buf))
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    start = 10 + hlen
    if len(buf) < start:
        raise FormatError("truncated checkpoint header", len(buf))
    header = json.loads(buf[10:start])
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        pos = start + e["offset"]
        if pos + 8 * n > len(buf):
            raise FormatError(f"truncated array {e['name']}", pos)
        arrays[e["name"]] = np.frombuffer(buf, "<f8", n, pos).reshape(tuple(e["shape"])).copy()
    return arrays, header["meta"]


# --- scene / config documents ---------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

NOISE_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["perfect", "gaussian", "outlier", "lowtexture_dropout"]},
        "a": {"type": "number", "minimum": 0},
        "b": {"type": "number", "minimum": 0},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "sigma_out": {"type": "number", "minimum": 0},
        "g_min": {"type": "number", "minimum": 0},
        "mode": {"enum": ["offset", "absolute"]},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

SCENE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "semfuse scene",
    "type": "object",
    "properties": {
        "size": _VEC3,
        "voxel_size": {"type": "number", "exclusiveMinimum": 0},
        "wall_thickness": {"type": "number", "minimum": 0},
        "shell": {"type": "boolean"},
        "labels": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "boxes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"label": {"type": "string"}, "min": _VEC3, "max": _VEC3},
                "required": ["label", "min", "max"],
                "additionalProperties": False,
            },
        },
        "textures": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "base": {"type": "number"},
                    "stripe_freq": {"type": "number", "minimum": 0},
                },
                "required": ["base", "stripe_freq"],
            },
        },
        "random_seed": {"type": "integer", "description": "generate a default room from this seed"},
        "camera": {
            "type": "object",
            "properties": {
                k: {"type": "number"} for k in ("fx", "fy", "cx", "cy", "width", "height")
            },
            "required": ["fx", "fy", "cx", "cy", "width", "height"],
        },
        "sensors": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "stereo": {"type": "boolean"},
                    "baseline": {"type": "number", "minimum": 0},
                    "models": {"type": "array", "items": NOISE_SCHEMA},
                },
                "required": ["name"],
                "additionalProperties": False,
            },
        },
        "trajectory": {
            "type": "object",
            "properties": {
                "views": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "truncation": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "semfuse training config",
    "type": "object",
    "properties": {
        "lr": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "crop": {"type": "integer", "minimum": 1},
        "lambda_f": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "eps_log": {"type": "number", "exclusiveMinimum": 0},
        "learn_confidence": {"type": "boolean"},
        "learn_steps": {"type": "boolean"},
        "crops_per_scene": {"type": "integer", "minimum": 1},
        "hidden_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "w_init": {"enum": ["tv", "zero"]},
        "w_init_weight": {"type": "number"},
        "solver": {
            "type": "object",
            "properties": {
                "iterations": {"type": "integer", "minimum": 0},
                "levels": {"type": "integer", "minimum": 1},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def read_document(path, schema: dict) -> dict:
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, schema)
    return doc


def write_document(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- PLY ------------------------------------------------------------------------

_CUBE_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
    dtype=np.float64,
)
_CUBE_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [3, 7, 6], [3, 6, 2],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ]
)  # fmt: skip

DEFAULT_PALETTE = [
    (200, 200, 200),
    (166, 118, 29),
    (31, 120, 180),
    (178, 223, 138),
    (227, 26, 28),
    (255, 127, 0),
    (106, 61, 154),
    (177, 89, 40),
    (51, 160, 44),
    (251, 154, 153),
]


def export_ply(path, occupied: np.ndarray, spec: VoxelGridSpec, palette=None) -> tuple[int, int]:
    """Write every voxel where ``occupied > 0`` as a colored cube (ASCII PLY).

    ``occupied`` holds label ids (color by palette) or any positive mask.
    Vertices are not shared between cubes. Returns ``(n_vertices, n_faces)``.
    """
    palette = palette or DEFAULT_PALETTE
    idx = np.argwhere(occupied > 0)
    labels = occupied[tuple(idx.T)].astype(np.int64) if len(idx) else np.zeros(0, np.int64)
    n_vox = len(idx)
    verts = (spec.origin + (idx[:, None, :] + _CUBE_CORNERS[None]) * spec.voxel_size).reshape(-1, 3)
    faces = (_CUBE_FACES[None] + 8 * np.arange(n_vox)[:, None, None]).reshape(-1, 3)
    cols = np.array([palette[int(l) % len(palette)] for l in labels], dtype=np.int64).reshape(-1, 3)
    vcols = np.repeat(cols, 8, axis=0)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [
        f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}" for v, c in zip(verts, vcols)
    ]
    lines += [f"3 {f[0]} {f[1]} {f[2]}" for f in faces]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return len(verts), len(faces)
