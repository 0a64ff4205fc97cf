"""OBJ meshes, PLY/CSV point clouds and TOML configuration files."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import tomli
import tomli_w


class FormatError(ValueError):
    pass


# -- OBJ ------------------------------------------------------------------------


def save_mesh(path, vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.intp)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            try:
                verts.append([float(t) for t in parts[1:4]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad vertex") from None
            if len(verts[-1]) != 3:
                raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
        elif parts[0] == "f":
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: only triangular faces are supported")
            try:
                faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad face") from None
    if not verts:
        raise FormatError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise FormatError(f"{path}: face index out of range")
    return v, f


# -- point clouds ----------------------------------------------------------------


def save_cloud(path, points, labels=None):
    """Binary little-endian PLY (float64 xyz, optional int32 label) or CSV by suffix."""
    path = Path(path)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if path.suffix.lower() == ".csv":
        with path.open("w") as fh:
            for i, p in enumerate(points):
                row = [repr(float(c)) for c in p]
                if labels is not None:
                    row.append(str(int(labels[i])))
                fh.write(",".join(row) + "\n")
        return
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}",
              "property double x", "property double y", "property double z"]
    if labels is not None:
        fields.append(("label", "<i4"))
        header.append("property int label")
    header.append("end_header")
    data = np.empty(len(points), dtype=fields)
    data["x"], data["y"], data["z"] = points.T
    if labels is not None:
        data["label"] = np.asarray(labels, dtype=np.int32)
    with path.open("wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


_PLY_TYPES = {"double": "<f8", "float64": "<f8", "float": "<f4", "float32": "<f4",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "uchar": "u1", "uint8": "u1",
              "short": "<i2", "ushort": "<u2", "char": "i1"}


def load_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: malformed PLY header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    count, fields, fmt, in_vertex = None, [], None, False
    for line in header[1:]:
        t = line.split()
        if not t or t[0] in ("comment", "obj_info"):
            continue
        if t[0] == "format":
            fmt = t[1]
        elif t[0] == "element":
            in_vertex = t[1] == "vertex"
            if in_vertex:
                count = int(t[2])
            elif count is not None:
                break
        elif t[0] == "property" and in_vertex:
            if t[1] == "list" or t[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported vertex property {line!r}")
            fields.append((t[2], _PLY_TYPES[t[1]]))
    if fmt != "binary_little_endian" or count is None:
        raise FormatError(f"{path}: need a binary_little_endian PLY with a vertex element")
    names = [f[0] for f in fields]
    if names[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertex properties must start with x, y, z")
    dtype = np.dtype(fields)
    body = raw[end + len(b"end_header\n"):]
    if len(body) < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    data = np.frombuffer(body, dtype=dtype, count=count)
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    _check_points(pts, path)
    labels = data["label"].astype(np.intp) if "label" in names else None
    return pts, labels


def _load_csv(path: Path):
    rows, labels = [], []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        t = line.split(",")
        if len(t) not in (3, 4):
            raise FormatError(f"{path}: row {i}: expected x,y,z[,label]")
        try:
            rows.append([float(v) for v in t[:3]])
            if len(t) == 4:
                labels.append(int(t[3]))
        except ValueError:
            raise FormatError(f"{path}: row {i}: not a number") from None
    if labels and len(labels) != len(rows):
        raise FormatError(f"{path}: labels present on only some rows")
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    _check_points(pts, path)
    return pts, (np.asarray(labels, dtype=np.intp) if labels else None)


def _check_points(pts, path):
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise FormatError(f"{path}: row {int(np.argmax(bad))}: non-finite coordinate")


# -- config ------------------------------------------------------------------------


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as e:
        raise FormatError(f"{path}: {e}") from None


def save_toml(path, doc: dict):
    with open(path, "wb") as fh:
        tomli_w.dump(doc, fh)
