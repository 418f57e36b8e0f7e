"""File formats: PLY point clouds, camera JSON, the OCTS scene container,
8-bit RGB PNG frames, and NDJSON training logs.

All loaders reject malformed input with a structured error (never a crash,
never a silent default). The OCTS container is little-endian with a
trailing CRC32 and round-trips scenes bit-exactly: lattice coordinates as
int64, lod_bias and header floats as float64, child attributes as the same
float32 the scene holds in memory.

COLMAP's own binary formats are deliberately not parsed here; convert
sparse reconstructions to PLY + camera JSON upstream.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib

import numpy as np
from PIL import Image

from .scene import Camera, OctreeScene, SceneError


class FileFormatError(ValueError):
    pass


class PlyParseError(FileFormatError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class CameraFormatError(FileFormatError):
    pass


class SceneFileError(FileFormatError):
    pass


class ImageFormatError(FileFormatError):
    pass


# ---------------------------------------------------------------------------
# PLY

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_STRUCT = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyParseError("not a PLY file (missing 'ply'/'end_header')", 0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyParseError("header not terminated", end)
    body_off = nl + 1
    try:
        lines = data[:end].decode("latin-1").splitlines()
    except Exception as exc:  # pragma: no cover - latin-1 decodes anything
        raise PlyParseError(f"undecodable header: {exc}", 0)
    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment" or parts[0] == "obj_info":
            continue
        if parts[0] == "format":
            if len(parts) < 2:
                raise PlyParseError("malformed format line")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError(f"malformed element line: {line!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyParseError(f"bad element count: {line!r}")
            if count < 0:
                raise PlyParseError(f"negative element count: {line!r}")
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError("property before any element")
            if len(parts) < 2:
                raise PlyParseError(f"malformed property: {line!r}")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PlyParseError(f"malformed list property: {line!r}")
                if parts[2] not in _PLY_SIZES or parts[3] not in _PLY_SIZES:
                    raise PlyParseError(f"unknown list property types: {line!r}")
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                if len(parts) != 3:
                    raise PlyParseError(f"malformed property: {line!r}")
                if parts[1] not in _PLY_SIZES:
                    raise PlyParseError(f"unknown property type: {line!r}")
                elements[-1][2].append((parts[2], parts[1], None))
        else:
            raise PlyParseError(f"unknown header keyword: {parts[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyParseError(f"unsupported PLY format: {fmt!r}")
    for name, count, props in elements:
        if count > 0 and not props:
            raise PlyParseError(f"element {name!r} has rows but no properties")
    return fmt, elements, body_off


def load_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Load x/y/z (and optional red/green/blue) from an ASCII or
    binary-little-endian PLY. Unknown properties are skipped by size."""
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, off = _parse_ply_header(data)

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise PlyParseError("no vertex element")
    names = [p[0] for p in vertex[2]]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyParseError(f"vertex element missing property {axis!r}")
        ptype = vertex[2][names.index(axis)][1]
        if ptype not in ("float", "float32", "double", "float64"):
            raise PlyParseError(f"property {axis!r} must be float, got {ptype}")
    has_rgb = all(c in names for c in ("red", "green", "blue"))

    if fmt == "ascii":
        rows = _read_ascii_elements(data, off, elements)
    else:
        rows = _read_binary_elements(data, off, elements)
    vrows = rows["vertex"]
    pts = np.array([[r[names.index("x")], r[names.index("y")], r[names.index("z")]]
                    for r in vrows], dtype=np.float64).reshape(-1, 3)
    colors = None
    if has_rgb:
        colors = np.array([[r[names.index("red")], r[names.index("green")], r[names.index("blue")]]
                           for r in vrows], dtype=np.float64).reshape(-1, 3)
    return pts, colors


def _read_ascii_elements(data: bytes, off: int, elements) -> dict:
    text = data[off:].decode("latin-1", errors="replace")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    rows: dict[str, list] = {}
    cursor = 0
    for name, count, props in elements:
        out = []
        for n in range(count):
            if cursor >= len(lines):
                raise PlyParseError(
                    f"element {name!r} truncated: row {n} of {count} missing",
                    len(data))
            tokens = lines[cursor].split()
            cursor += 1
            row = []
            ti = 0
            for pname, ptype, ltype in props:
                try:
                    if ltype is not None:
                        cnt = int(tokens[ti]); ti += 1 + cnt
                        row.append(None)
                    else:
                        row.append(float(tokens[ti])); ti += 1
                except (IndexError, ValueError):
                    raise PlyParseError(
                        f"bad {name!r} row {n}: {lines[cursor - 1]!r}", None)
            out.append(row)
        rows[name] = out
    return rows


def _read_binary_elements(data: bytes, off: int, elements) -> dict:
    rows: dict[str, list] = {}
    pos = off
    n_bytes = len(data)
    for name, count, props in elements:
        fixed = all(p[2] is None for p in props)
        out = []
        if fixed:
            stride = sum(_PLY_SIZES[p[1]] for p in props)
            need = stride * count
            if pos + need > n_bytes:
                raise PlyParseError(
                    f"element {name!r} truncated: need {need} bytes", pos)
            fmt = "<" + "".join(_PLY_STRUCT[p[1]] for p in props)
            for n in range(count):
                out.append(list(struct.unpack_from(fmt, data, pos)))
                pos += stride
        else:
            for n in range(count):
                row = []
                for pname, ptype, ltype in props:
                    if ltype is None:
                        size = _PLY_SIZES[ptype]
                        if pos + size > n_bytes:
                            raise PlyParseError(
                                f"element {name!r} truncated in row {n}", pos)
                        row.append(struct.unpack_from("<" + _PLY_STRUCT[ptype], data, pos)[0])
                        pos += size
                    else:
                        csize = _PLY_SIZES[ltype]
                        if pos + csize > n_bytes:
                            raise PlyParseError(
                                f"list count truncated in {name!r} row {n}", pos)
                        cnt = struct.unpack_from("<" + _PLY_STRUCT[ltype], data, pos)[0]
                        pos += csize
                        skip = cnt * _PLY_SIZES[ptype]
                        if cnt < 0 or pos + skip > n_bytes:
                            raise PlyParseError(
                                f"list payload truncated in {name!r} row {n}", pos)
                        row.append(None)
                        pos += skip
                out.append(row)
        rows[name] = out
    return rows


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None,
              binary: bool = True) -> None:
    """Writer counterpart used by fixtures and converters."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            for i, p in enumerate(pts):
                fh.write(struct.pack("<fff", *p.astype(np.float32)))
                if colors is not None:
                    fh.write(struct.pack("<BBB", *(int(c) for c in colors[i])))
        else:
            for i, p in enumerate(pts):
                row = f"{p[0]} {p[1]} {p[2]}"
                if colors is not None:
                    row += " " + " ".join(str(int(c)) for c in colors[i])
                fh.write((row + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# cameras

_REQUIRED_CAMERA_FIELDS = ("position", "quaternion_wxyz", "fx", "fy", "cx",
                           "cy", "width", "height")


def camera_from_record(rec: dict, index: int = 0) -> Camera:
    for f in _REQUIRED_CAMERA_FIELDS:
        if f not in rec:
            raise CameraFormatError(f"camera {index}: missing field {f!r}")
    q = np.asarray(rec["quaternion_wxyz"], dtype=np.float64)
    if q.shape != (4,):
        raise CameraFormatError(f"camera {index}: quaternion_wxyz must have 4 entries")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise CameraFormatError(f"camera {index}: zero quaternion")
    if abs(norm - 1.0) > 1e-3:
        warnings.warn(f"camera {index}: quaternion norm {norm:.6f} deviates from 1; normalizing")
    pos = np.asarray(rec["position"], dtype=np.float64)
    if pos.shape != (3,):
        raise CameraFormatError(f"camera {index}: position must have 3 entries")
    cam = Camera(
        position=pos, rotation=q / norm,
        fx=float(rec["fx"]), fy=float(rec["fy"]),
        cx=float(rec["cx"]), cy=float(rec["cy"]),
        width=int(rec["width"]), height=int(rec["height"]),
        footprint_scale=float(rec.get("footprint_scale", 1.0)),
    )
    try:
        cam.validate()
    except SceneError as exc:
        raise CameraFormatError(f"camera {index}: {exc}")
    return cam


def load_cameras(path) -> list[Camera]:
    """Parse the documented camera JSON array (see README for the schema)."""
    with open(path) as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CameraFormatError(f"invalid JSON: {exc}")
    if not isinstance(records, list):
        raise CameraFormatError("camera file must hold a JSON array")
    return [camera_from_record(rec, i) for i, rec in enumerate(records)]


def load_camera_records(path) -> list[dict]:
    """Raw records, preserving optional fields such as 'image'."""
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise CameraFormatError("camera file must hold a JSON array")
    return records


def camera_to_record(cam: Camera, image: str | None = None) -> dict:
    rec = {
        "position": [float(v) for v in cam.position],
        "quaternion_wxyz": [float(v) for v in cam.rotation],
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "footprint_scale": cam.footprint_scale,
    }
    if image is not None:
        rec["image"] = image
    return rec


def write_cameras(path, cameras: list[Camera], images: list[str] | None = None) -> None:
    records = [camera_to_record(c, images[i] if images else None)
               for i, c in enumerate(cameras)]
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)


# ---------------------------------------------------------------------------
# OCTS scene container

_OCTS_MAGIC = b"OCTS"
_OCTS_VERSION = 1
_OCTS_HEADER = struct.Struct("<4sIIIQddd")


def save_scene(path, scene: OctreeScene) -> None:
    m = scene.anchor_count
    k = scene.children_per_anchor
    parts = [_OCTS_HEADER.pack(_OCTS_MAGIC, _OCTS_VERSION, scene.num_levels, k,
                               m, scene.epsilon, scene.d_min_hat, scene.d_max_hat)]
    parts.append(scene.levels.astype("<i4").tobytes())
    parts.append(scene.lattice.astype("<i8").tobytes())
    parts.append(scene.lod_bias.astype("<f8").tobytes())
    for name in ("offsets", "scales", "rotations", "opacities", "colors"):
        parts.append(getattr(scene, name).astype("<f4").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_scene(path) -> OctreeScene:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _OCTS_HEADER.size + 4:
        raise SceneFileError("file too short for an OCTS container")
    payload, crc_bytes = data[:-4], data[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise SceneFileError("CRC mismatch: file corrupted")
    magic, version, num_levels, k, m, eps, d_min, d_max = _OCTS_HEADER.unpack_from(payload, 0)
    if magic != _OCTS_MAGIC:
        raise SceneFileError(f"bad magic {magic!r}")
    if version != _OCTS_VERSION:
        raise SceneFileError(f"unsupported version {version}")
    pos = _OCTS_HEADER.size

    def take(dtype, count, shape):
        nonlocal pos
        nbytes = np.dtype(dtype).itemsize * count
        if pos + nbytes > len(payload):
            raise SceneFileError("payload truncated")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr.reshape(shape)

    levels = take("<i4", m, (m,))
    lattice = take("<i8", m * 3, (m, 3))
    bias = take("<f8", m, (m,))
    offsets = take("<f4", m * k * 3, (m, k, 3))
    scales = take("<f4", m * k * 3, (m, k, 3))
    rotations = take("<f4", m * k * 4, (m, k, 4))
    opacities = take("<f4", m * k, (m, k))
    colors = take("<f4", m * k * 3, (m, k, 3))
    if pos != len(payload):
        raise SceneFileError(f"{len(payload) - pos} trailing bytes in payload")

    scene = OctreeScene(eps, num_levels, d_min, d_max, k)
    scene.levels = levels.astype(np.int32)
    scene.lattice = lattice.astype(np.int64)
    scene.lod_bias = bias.astype(np.float64)
    scene.offsets = offsets.astype(np.float32)
    scene.scales = scales.astype(np.float32)
    scene.rotations = rotations.astype(np.float32)
    scene.opacities = opacities.astype(np.float32)
    scene.colors = colors.astype(np.float32)
    k_ch = scene.children_per_anchor
    scene.grad_accum = np.zeros((m, k_ch))
    scene.opacity_accum = np.zeros((m, k_ch))
    scene.stat_count = np.zeros(m, dtype=np.int64)
    try:
        scene._rebuild_occupancy()
        scene.validate()
    except SceneError as exc:
        raise SceneFileError(f"inconsistent scene: {exc}")
    return scene


# ---------------------------------------------------------------------------
# images

def read_image(path) -> np.ndarray:
    """8-bit RGB PNG to a float64 (H,W,3) array in [0,1]."""
    img = Image.open(path)
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise ImageFormatError(f"unsupported bit depth (mode {img.mode})")
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Float image in [0,1] to 8-bit RGB PNG, rounded to nearest."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"expected (H,W,3) image, got {arr.shape}")
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# logs

def write_ndjson(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
