"""File formats: OBJ with a face-range sidecar, binary little-endian PLY.

Cloud PLY layout (per vertex): x y z float32, red green blue uchar,
nx ny nz float32, object_id part_id uint32. Mesh PLY: float32 vertices and
triangle faces with per-face uint32 object_id / part_id. The label table
travels in a JSON sidecar because PLY has no string-map element.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import AnnotatedCloud, GeometryError, TriMesh
from .util import dump_json, load_json


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- OBJ

def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangulated faces (fan triangulation for polygons)."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: malformed vertex")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    if i < 0:
                        raise FormatError(f"{path}:{lineno}: negative face indices unsupported")
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise FormatError(f"{path}:{lineno}: face with <3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), \
        np.array(faces, dtype=np.int64).reshape(-1, 3)


def read_obj_with_sidecar(obj_path, sidecar_path=None):
    """Load an OBJ plus its face-range annotation sidecar.

    Sidecar schema: {"face_ranges": [{"start", "end", "object_id", "part_id",
    "label"}, ...]} with `end` exclusive; ranges must tile the face list.
    Returns (TriMesh, part_labels dict) after degenerate-face cleanup.
    """
    obj_path = Path(obj_path)
    if sidecar_path is None:
        sidecar_path = obj_path.with_suffix(".json")
    verts, faces = read_obj(obj_path)
    meta = load_json(sidecar_path)
    ranges = meta.get("face_ranges")
    if not ranges:
        raise FormatError(f"{sidecar_path}: missing face_ranges")

    nf = len(faces)
    part = np.full(nf, -1, dtype=np.int64)
    obj = np.full(nf, -1, dtype=np.int64)
    labels = {}
    for r in ranges:
        s, e = int(r["start"]), int(r["end"])
        if not (0 <= s < e <= nf):
            raise FormatError(
                f"{sidecar_path}: face range [{s},{e}) out of bounds for {nf} faces")
        if np.any(part[s:e] != -1):
            raise FormatError(f"{sidecar_path}: overlapping face ranges at [{s},{e})")
        part[s:e] = int(r["part_id"])
        obj[s:e] = int(r["object_id"])
        labels[int(r["part_id"])] = str(r["label"])
    if np.any(part == -1):
        raise FormatError(f"{sidecar_path}: face ranges do not cover all faces")

    mesh = TriMesh(verts, faces, part, obj).drop_degenerate_faces()
    return mesh, labels


def write_obj_with_sidecar(mesh: TriMesh, labels: dict, obj_path, extra_meta=None):
    """Write an OBJ and its sidecar; faces are reordered by (object, part) so
    annotations compress to one range per run."""
    obj_path = Path(obj_path)
    order = np.lexsort((mesh.face_part_id, mesh.face_object_id))
    faces = mesh.faces[order]
    part = mesh.face_part_id[order]
    obj = mesh.face_object_id[order]

    obj_path.parent.mkdir(parents=True, exist_ok=True)
    with open(obj_path, "w", encoding="utf-8") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")

    ranges = []
    start = 0
    for i in range(1, len(faces) + 1):
        if i == len(faces) or part[i] != part[start] or obj[i] != obj[start]:
            ranges.append({
                "start": int(start), "end": int(i),
                "object_id": int(obj[start]), "part_id": int(part[start]),
                "label": labels[int(part[start])],
            })
            start = i
    meta = dict(extra_meta or {})
    meta["face_ranges"] = ranges
    dump_json(meta, obj_path.with_suffix(".json"))


# ---------------------------------------------------------------- PLY

_CLOUD_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("object_id", "<u4"), ("part_id", "<u4"),
])

_FACE_DTYPE = np.dtype([
    ("count", "u1"),
    ("v0", "<i4"), ("v1", "<i4"), ("v2", "<i4"),
    ("object_id", "<u4"), ("part_id", "<u4"),
])


def write_cloud_ply(cloud: AnnotatedCloud, path, label_sidecar=True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(cloud)
    rec = np.empty(n, dtype=_CLOUD_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    rec["red"], rec["green"], rec["blue"] = cloud.colors.T
    normals = cloud.normals if cloud.normals is not None else np.zeros((n, 3))
    rec["nx"], rec["ny"], rec["nz"] = normals.T.astype(np.float32)
    rec["object_id"] = cloud.object_id.astype(np.uint32)
    rec["part_id"] = cloud.part_id.astype(np.uint32)

    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uint object_id\nproperty uint part_id\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        rec.tofile(f)
    if label_sidecar:
        dump_json({str(k): v for k, v in cloud.label_table.items()},
                  path.parent / "labels.json")


def read_cloud_ply(path, label_table=None) -> AnnotatedCloud:
    path = Path(path)
    body, count = _read_ply_body(path, "vertex", _CLOUD_DTYPE)
    rec = np.frombuffer(body, dtype=_CLOUD_DTYPE, count=count)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    has_normals = np.all(lens > 1e-6)
    normals = normals / np.where(lens > 0, lens, 1.0) if has_normals else None
    if label_table is None:
        sidecar = path.parent / "labels.json"
        if sidecar.exists():
            label_table = {int(k): v for k, v in load_json(sidecar).items()}
        else:
            label_table = {int(p): f"part_{int(p)}" for p in np.unique(rec["part_id"])}
    return AnnotatedCloud(points=points, colors=colors, normals=normals,
                          object_id=rec["object_id"].astype(np.int64),
                          part_id=rec["part_id"].astype(np.int64),
                          label_table=label_table)


def write_mesh_ply(mesh: TriMesh, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    verts = mesh.vertices.astype("<f4")
    rec = np.empty(mesh.num_faces, dtype=_FACE_DTYPE)
    rec["count"] = 3
    rec["v0"], rec["v1"], rec["v2"] = mesh.faces.T.astype(np.int32)
    rec["object_id"] = mesh.face_object_id.astype(np.uint32)
    rec["part_id"] = mesh.face_part_id.astype(np.uint32)

    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.num_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {mesh.num_faces}\n"
        "property list uchar int vertex_indices\n"
        "property uint object_id\nproperty uint part_id\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        verts.tofile(f)
        rec.tofile(f)


def read_mesh_ply(path) -> TriMesh:
    path = Path(path)
    header, offset = _parse_ply_header(path)
    if header["format"] != "binary_little_endian":
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    counts = dict(header["elements"])
    nv = counts.get("vertex")
    nf = counts.get("face")
    if nv is None or nf is None:
        raise FormatError(f"{path}: mesh PLY needs vertex and face elements")
    with open(path, "rb") as f:
        f.seek(offset)
        verts = np.fromfile(f, dtype="<f4", count=nv * 3).reshape(nv, 3)
        rec = np.fromfile(f, dtype=_FACE_DTYPE, count=nf)
    if len(rec) != nf:
        raise FormatError(f"{path}: truncated face data")
    if np.any(rec["count"] != 3):
        raise FormatError(f"{path}: only triangle faces are supported")
    faces = np.stack([rec["v0"], rec["v1"], rec["v2"]], axis=1).astype(np.int64)
    return TriMesh(verts.astype(np.float64), faces,
                   rec["part_id"].astype(np.int64), rec["object_id"].astype(np.int64))


def _parse_ply_header(path):
    """Minimal header scan: format line and element counts, in order."""
    elements = []
    fmt = None
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated PLY header")
            tok = line.decode("ascii", errors="replace").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2])))
            elif tok[0] == "end_header":
                return {"format": fmt, "elements": elements}, f.tell()


def _read_ply_body(path, element, dtype):
    header, offset = _parse_ply_header(path)
    if header["format"] != "binary_little_endian":
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    counts = dict(header["elements"])
    if element not in counts:
        raise FormatError(f"{path}: missing element '{element}'")
    count = counts[element]
    with open(path, "rb") as f:
        f.seek(offset)
        body = f.read(dtype.itemsize * count)
    if len(body) != dtype.itemsize * count:
        raise FormatError(f"{path}: truncated {element} data")
    return body, count
