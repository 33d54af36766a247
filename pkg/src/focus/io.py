"""Serialization: FIMG float rasters, PLY clouds/meshes and the scene manifest.

All writers are deterministic: the same in-memory object always produces the
same bytes.
"""
from __future__ import annotations

import enum
import json
import struct
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import BadMagicError, FormatError, SchemaError, TruncatedFileError, UnknownVersionError
from .geometry import ORTHONORMAL_TOL, OrientedPointCloud, TriMesh

# --------------------------------------------------------------------------
# FIMG rasters
# --------------------------------------------------------------------------
FIMG_MAGIC = b"FIMG"
FIMG_VERSION = 1
_FIMG_HEADER = struct.Struct("<4sIIIIB")


class Channel(enum.IntEnum):
    TOC_MEAN = 1
    TOC_LOGVAR = 2
    NORMAL = 3
    MASK = 4
    DEPTH = 5


def write_fimg(path, data: np.ndarray, tag: Channel) -> None:
    """Write an (H, W) or (H, W, C) raster as little-endian float32."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_FIMG_HEADER.pack(FIMG_MAGIC, FIMG_VERSION, w, h, c, int(Channel(tag))))
        fh.write(payload)


def read_fimg_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_FIMG_HEADER.size)
    return _parse_fimg_header(path, head)


def _parse_fimg_header(path, head: bytes):
    if len(head) < 4 or head[:4] != FIMG_MAGIC:
        raise BadMagicError(f"{path}: bad magic {head[:4]!r} at byte offset 0 (expected b'FIMG')")
    if len(head) < _FIMG_HEADER.size:
        raise TruncatedFileError(
            f"{path}: header truncated at byte offset {len(head)} (expected {_FIMG_HEADER.size} bytes)"
        )
    _, version, w, h, c, tag = _FIMG_HEADER.unpack(head)
    if version != FIMG_VERSION:
        raise UnknownVersionError(f"{path}: unknown FIMG version {version} at byte offset 4")
    try:
        tag = Channel(tag)
    except ValueError:
        raise FormatError(f"{path}: unknown channel tag {tag} at byte offset 20") from None
    return w, h, c, tag


def read_fimg(path):
    """Return ``(array (H, W, C) float32, Channel)``; sentinels survive bit-exactly."""
    raw = Path(path).read_bytes()
    w, h, c, tag = _parse_fimg_header(path, raw[: _FIMG_HEADER.size])
    expected = w * h * c * 4
    actual = len(raw) - _FIMG_HEADER.size
    if actual < expected:
        raise TruncatedFileError(
            f"{path}: payload truncated at byte offset {len(raw)}: expected {expected} bytes, found {actual}"
        )
    if actual > expected:
        raise FormatError(
            f"{path}: {actual - expected} trailing bytes after payload at byte offset {_FIMG_HEADER.size + expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=_FIMG_HEADER.size).reshape(h, w, c)
    return arr.astype(np.float32), tag


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, obj: Union[TriMesh, OrientedPointCloud, np.ndarray], ascii: bool = False) -> None:
    """Write a mesh, oriented cloud or bare (N, 3) point array.

    Binary little-endian by default; vertex order is preserved.
    """
    if isinstance(obj, TriMesh):
        points, normals, faces = obj.vertices, obj.normals, obj.faces
    elif isinstance(obj, OrientedPointCloud):
        points, normals, faces = obj.positions, obj.normals, None
    else:
        points, normals, faces = np.asarray(obj, dtype=float).reshape(-1, 3), None, None

    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    cols = [points] + ([normals] if normals is not None else [])
    vert = np.ascontiguousarray(np.hstack(cols), dtype="<f4")
    lines = ["ply", f"format {'ascii' if ascii else 'binary_little_endian'} 1.0", f"element vertex {len(vert)}"]
    lines += [f"property float {n}" for n in names]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(header)
        if ascii:
            body = [" ".join(repr(float(v)) for v in row) for row in vert]
            if faces is not None:
                body += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
            fh.write(("\n".join(body) + ("\n" if body else "")).encode("ascii"))
        else:
            fh.write(vert.tobytes())
            if faces is not None and len(faces):
                rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = faces
                fh.write(rec.tobytes())


def _parse_ply_header(raw: bytes, path):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file (missing 'ply' magic or end_header)")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    fmt = None
    elements: List[dict] = []
    for lineno, line in enumerate(raw[:end].decode("ascii", errors="replace").splitlines()[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise FormatError(f"{path}: unsupported format line {lineno}: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"{path}: malformed element line {lineno}: {line!r}")
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before any element on line {lineno}")
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError(f"{path}: malformed list property on line {lineno}: {line!r}")
                elements[-1]["props"].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}: malformed property on line {lineno}: {line!r}")
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]], None))
        else:
            raise FormatError(f"{path}: unexpected header line {lineno}: {line!r}")
    if fmt is None:
        raise FormatError(f"{path}: missing format line")
    return fmt, elements, body_start


def _read_binary_element(raw, pos, el, endian, path):
    props = el["props"]
    if all(p[2] is None for p in props):
        dt = np.dtype([(name, endian + t) for name, t, _ in props])
        nbytes = dt.itemsize * el["count"]
        if pos + nbytes > len(raw):
            present = (len(raw) - pos) // dt.itemsize
            raise FormatError(
                f"{path}: element '{el['name']}' declares {el['count']} entries but only {present} present"
            )
        arr = np.frombuffer(raw, dtype=dt, count=el["count"], offset=pos)
        return {name: arr[name].astype(float) for name, _, _ in props}, pos + nbytes
    # list-bearing element: fast path for the common fixed-length triangle list
    if len(props) == 1 and props[0][2] is not None:
        name, ct, it = props[0]
        dt = np.dtype([("n", endian + ct), ("idx", endian + it, (3,))])
        if el["count"] == 0:
            return {name: np.zeros((0, 3), dtype=np.int64)}, pos
        if pos + dt.itemsize * el["count"] <= len(raw):
            arr = np.frombuffer(raw, dtype=dt, count=el["count"], offset=pos)
            if np.all(arr["n"] == 3):
                return {name: arr["idx"].astype(np.int64)}, pos + dt.itemsize * el["count"]
    out: Dict[str, list] = {name: [] for name, _, _ in props}
    for i in range(el["count"]):
        for name, t, it in props:
            try:
                if it is None:
                    size = np.dtype(t).itemsize
                    out[name].append(float(np.frombuffer(raw, endian + t, 1, pos)[0]))
                    pos += size
                else:
                    n = int(np.frombuffer(raw, endian + t, 1, pos)[0])
                    pos += np.dtype(t).itemsize
                    vals = np.frombuffer(raw, endian + it, n, pos)
                    pos += n * np.dtype(it).itemsize
                    out[name].append(vals.astype(np.int64))
            except ValueError:
                raise FormatError(
                    f"{path}: element '{el['name']}' declares {el['count']} entries but only {i} present"
                ) from None
    return {k: (np.array(v) if v and np.ndim(v[0]) == 0 else v) for k, v in out.items()}, pos


def _read_ascii_elements(text_lines, elements, path):
    data = {}
    it = iter(text_lines)
    for el in elements:
        cols: Dict[str, list] = {name: [] for name, _, _ in el["props"]}
        for i in range(el["count"]):
            try:
                tok = next(it).split()
                while not tok:
                    tok = next(it).split()
            except StopIteration:
                raise FormatError(
                    f"{path}: element '{el['name']}' declares {el['count']} entries but only {i} present"
                ) from None
            k = 0
            try:
                for name, _, lt in el["props"]:
                    if lt is None:
                        cols[name].append(float(tok[k]))
                        k += 1
                    else:
                        n = int(tok[k])
                        cols[name].append(np.array([int(v) for v in tok[k + 1 : k + 1 + n]], dtype=np.int64))
                        if len(cols[name][-1]) != n:
                            raise IndexError
                        k += 1 + n
            except (IndexError, ValueError):
                raise FormatError(f"{path}: malformed entry {i} of element '{el['name']}'") from None
        data[el["name"]] = {k: (np.array(v, dtype=float) if v and np.ndim(v[0]) == 0 else v) for k, v in cols.items()}
    return data


def read_ply_elements(path) -> Dict[str, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(raw, path)
    if fmt == "ascii":
        return _read_ascii_elements(raw[pos:].decode("ascii").splitlines(), elements, path)
    endian = "<" if fmt == "binary_little_endian" else ">"
    data = {}
    for el in elements:
        data[el["name"]], pos = _read_binary_element(raw, pos, el, endian, path)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} unexpected trailing bytes after last element")
    return data


def read_ply(path) -> Union[TriMesh, OrientedPointCloud, np.ndarray]:
    """Load a PLY as ``TriMesh`` (faces present), ``OrientedPointCloud``
    (normals, no faces) or a bare (N, 3) array."""
    data = read_ply_elements(path)
    if "vertex" not in data:
        raise FormatError(f"{path}: no vertex element")
    v = data["vertex"]
    try:
        pts = np.stack([v["x"], v["y"], v["z"]], axis=1) if len(v["x"]) else np.zeros((0, 3))
    except KeyError as exc:
        raise FormatError(f"{path}: vertex element lacks property {exc}") from None
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1) if len(pts) else np.zeros((0, 3))
    face = data.get("face")
    if face is not None:
        lists = face.get("vertex_indices", face.get("vertex_index"))
        if lists is None:
            raise FormatError(f"{path}: face element lacks vertex_indices")
        faces = np.asarray(lists, dtype=np.int64).reshape(-1, 3) if len(lists) else np.zeros((0, 3), np.int64)
        if normals is not None:
            n = np.linalg.norm(normals, axis=1, keepdims=True)
            normals = np.divide(normals, n, out=np.zeros_like(normals), where=n > 0)
        try:
            return TriMesh(pts, faces, normals)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if normals is not None:
        return OrientedPointCloud(pts, normals)
    return pts


def read_mesh(path) -> TriMesh:
    obj = read_ply(path)
    if not isinstance(obj, TriMesh):
        raise FormatError(f"{path}: expected a mesh with faces")
    return obj


# --------------------------------------------------------------------------
# Scene manifest
# --------------------------------------------------------------------------
MANIFEST_VERSION = 1
RASTER_KEYS = ("toc_mean", "toc_logvar", "normal", "mask", "depth")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Intrinsics(_Strict):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float


class ViewEntry(_Strict):
    name: str
    intrinsics: Intrinsics
    rotation: List[List[float]]
    translation: List[float] = Field(min_length=3, max_length=3)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    azimuth_deg: Optional[float] = None
    rasters: Dict[Literal["toc_mean", "toc_logvar", "normal", "mask", "depth"], str]

    @field_validator("rotation")
    @classmethod
    def _orthonormal(cls, v):
        R = np.asarray(v, dtype=float)
        if R.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0) or abs(np.linalg.det(R) - 1) > ORTHONORMAL_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        return v


class ModelSpec(_Strict):
    seed: int = 0
    dim_shape: int = Field(default=4, ge=0)
    dim_pose: int = Field(default=4, ge=0)
    template: Optional[str] = None


class ParamsEntry(_Strict):
    r: List[float] = Field(min_length=3, max_length=3)
    s: float = Field(gt=0)
    t: List[float] = Field(min_length=3, max_length=3)
    z_s: List[float]
    z_p: List[float]


class NoiseEntry(_Strict):
    sigma_base: float = Field(ge=0)
    sigma_range: float = Field(ge=0)
    normal_sigma: float = Field(default=0.0, ge=0)


class SceneManifest(_Strict):
    version: int
    units: Literal["mm"] = "mm"
    model: ModelSpec
    gt_params: Optional[ParamsEntry] = None
    gt_mesh: Optional[str] = None
    noise: Optional[NoiseEntry] = None
    seed: Optional[int] = None
    views: List[ViewEntry] = Field(min_length=1)

    @field_validator("version")
    @classmethod
    def _known_version(cls, v):
        if v != MANIFEST_VERSION:
            raise ValueError(f"unknown manifest version {v}")
        return v


def _schema_error(path, exc: ValidationError) -> SchemaError:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return SchemaError(f"{path}: invalid manifest: " + "; ".join(parts))


def parse_manifest(data: dict, path="<manifest>") -> SceneManifest:
    try:
        return SceneManifest.model_validate(data)
    except ValidationError as exc:
        raise _schema_error(path, exc) from None


def write_manifest(path, manifest: SceneManifest) -> None:
    text = json.dumps(manifest.model_dump(mode="json", exclude_none=True), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def read_manifest(path, check_files: bool = True) -> SceneManifest:
    """Load and validate a manifest; raster paths resolve relative to its folder."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from None
    manifest = parse_manifest(data, path)
    if check_files:
        root = path.parent
        for i, view in enumerate(manifest.views):
            for key, rel in view.rasters.items():
                f = root / rel
                if not f.is_file():
                    raise SchemaError(f"{path}: views.{i}.rasters.{key}: file not found: {f}")
                w, h, _, _ = read_fimg_header(f)
                if (w, h) != (view.width, view.height):
                    raise SchemaError(
                        f"{path}: views.{i}.rasters.{key}: raster is {w}x{h}, manifest says {view.width}x{view.height}"
                    )
        if manifest.gt_mesh is not None and not (root / manifest.gt_mesh).is_file():
            raise SchemaError(f"{path}: gt_mesh: file not found: {root / manifest.gt_mesh}")
    return manifest
