"""Mesh and point-cloud primitives: sampling, normals, placement transforms, bounds.

Conventions used across the package: coordinates are meters, z is the vertical
axis, meshes are triangle soups with one part/object instance id per face, and
id 0 is reserved as the background sentinel in rendered buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .util import derive_rng

UP = np.array([0.0, 0.0, 1.0])

TIER_POINTS = {"large": 102400, "medium": 51200, "small": 25600}


class GeometryError(ValueError):
    pass


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise GeometryError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("vector components must be finite")
    return a


@dataclass
class AABB:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = as_vec3(self.min)
        self.max = as_vec3(self.max)
        if np.any(self.min > self.max):
            raise GeometryError("AABB min must be <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    def overlap_volume(self, other: "AABB") -> float:
        lo = np.maximum(self.min, other.min)
        hi = np.minimum(self.max, other.max)
        ext = np.maximum(hi - lo, 0.0)
        return float(ext[0] * ext[1] * ext[2])

    def intersects(self, other: "AABB") -> bool:
        """Strict interior overlap: touching faces do not count."""
        return self.overlap_volume(other) > 0.0

    def contains_xy(self, x: float, y: float) -> bool:
        return (self.min[0] <= x <= self.max[0]) and (self.min[1] <= y <= self.max[1])

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AABB":
        return cls(np.array(d["min"]), np.array(d["max"]))


def compute_aabb(points: np.ndarray) -> AABB:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise GeometryError("cannot compute AABB of an empty point set")
    pts = pts.reshape(-1, 3)
    return AABB(pts.min(axis=0), pts.max(axis=0))


@dataclass
class TriMesh:
    vertices: np.ndarray      # (V, 3) float64
    faces: np.ndarray         # (F, 3) int64 vertex indices
    face_part_id: np.ndarray  # (F,) int64 part instance id per face
    face_object_id: np.ndarray  # (F,) int64 object instance id per face

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.face_part_id = np.ascontiguousarray(self.face_part_id, dtype=np.int64).reshape(-1)
        self.face_object_id = np.ascontiguousarray(self.face_object_id, dtype=np.int64).reshape(-1)
        if len(self.face_part_id) != len(self.faces) or len(self.face_object_id) != len(self.faces):
            raise GeometryError("part/object id arrays must have exactly one entry per face")
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise GeometryError("face references vertex index out of range")
        if len(self.faces) and self.faces.min() < 0:
            raise GeometryError("negative vertex index in face")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]  # (F, 3, 3)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(cross, axis=1)
        safe = np.where(norm > 0, norm, 1.0)
        return cross / safe[:, None]

    def drop_degenerate_faces(self, area_eps: float = 0.0) -> "TriMesh":
        keep = self.face_areas() > area_eps
        return TriMesh(self.vertices, self.faces[keep],
                       self.face_part_id[keep], self.face_object_id[keep])

    def aabb(self) -> AABB:
        return compute_aabb(self.vertices)


@dataclass
class AnnotatedCloud:
    points: np.ndarray              # (N, 3) float64
    colors: np.ndarray              # (N, 3) uint8
    normals: Optional[np.ndarray]   # (N, 3) float64 unit vectors, or None before estimation
    object_id: np.ndarray           # (N,) int64
    part_id: np.ndarray             # (N,) int64
    label_table: dict               # part_id -> object_part label
    curvature: Optional[np.ndarray] = None  # (N,) local surface variation, filled by estimate_normals

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        self.object_id = np.ascontiguousarray(self.object_id, dtype=np.int64).reshape(-1)
        self.part_id = np.ascontiguousarray(self.part_id, dtype=np.int64).reshape(-1)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.label_table = {int(k): str(v) for k, v in self.label_table.items()}
        self.validate()

    def validate(self):
        n = len(self.points)
        for name in ("colors", "object_id", "part_id"):
            if len(getattr(self, name)) != n:
                raise GeometryError(f"{name} length {len(getattr(self, name))} != point count {n}")
        if self.normals is not None:
            if len(self.normals) != n:
                raise GeometryError("normals length mismatch")
            if n:
                lengths = np.linalg.norm(self.normals, axis=1)
                if np.any(np.abs(lengths - 1.0) > 1e-6):
                    raise GeometryError("normals must be unit length (within 1e-6)")
        missing = set(np.unique(self.part_id).tolist()) - set(self.label_table)
        if missing:
            raise GeometryError(f"part ids without label_table entry: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.points)

    def aabb(self) -> AABB:
        return compute_aabb(self.points)


@dataclass
class PlacementTransform:
    """Scale -> smooth jitter -> yaw -> translation, applied in that order."""
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    yaw: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jitter_amplitude: float = 0.0

    def __post_init__(self):
        self.scale = as_vec3(self.scale)
        self.translation = as_vec3(self.translation)
        self.yaw = float(self.yaw)
        self.jitter_amplitude = float(self.jitter_amplitude)
        if np.any(self.scale <= 0):
            raise GeometryError("scale components must be positive")
        if self.jitter_amplitude < 0:
            raise GeometryError("jitter_amplitude must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.tolist(),
            "yaw": self.yaw,
            "translation": self.translation.tolist(),
            "jitter_amplitude": self.jitter_amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementTransform":
        return cls(np.array(d["scale"]), d["yaw"], np.array(d["translation"]),
                   d["jitter_amplitude"])


def _jitter_modes(seed: int, diagonal: float, amplitude: float, n_modes: int = 8):
    """Low-frequency sinusoidal displacement field parameters.

    Per-mode amplitudes sum to `amplitude`, so the total displacement is
    bounded by it everywhere.
    """
    rng = derive_rng(seed, "jitter-field")
    dirs = rng.normal(size=(n_modes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    wave_dirs = rng.normal(size=(n_modes, 3))
    wave_dirs /= np.linalg.norm(wave_dirs, axis=1, keepdims=True)
    wavelengths = diagonal * rng.uniform(0.8, 2.0, size=n_modes)
    k = wave_dirs * (2.0 * np.pi / wavelengths)[:, None]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_modes)
    weights = rng.uniform(0.5, 1.0, size=n_modes)
    amps = amplitude * weights / weights.sum()
    return dirs, k, phases, amps


def _jitter_displacement(points: np.ndarray, modes) -> np.ndarray:
    dirs, k, phases, amps = modes
    disp = np.zeros_like(points)
    for m in range(len(amps)):
        phase = points @ k[m] + phases[m]
        disp += (amps[m] * np.sin(phase))[:, None] * dirs[m]
    return disp


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_placement(mesh: Optional[TriMesh], cloud: Optional[AnnotatedCloud],
                    t: PlacementTransform, seed: int):
    """Transform a mesh and/or its sampled cloud with one shared jitter field.

    Labels are untouched. Cloud normals are rotated by the yaw and corrected
    for anisotropic scale; the jitter field's warp on normals is ignored (it
    is bounded to a few percent of the shape diagonal and low-frequency).
    Returns (mesh, cloud) with None passed through.
    """
    if mesh is None and cloud is None:
        raise GeometryError("apply_placement needs a mesh or a cloud")

    ref_pts = mesh.vertices if mesh is not None else cloud.points
    diag = compute_aabb(ref_pts).diagonal
    if diag > 0 and t.jitter_amplitude > 0.05 * diag:
        raise GeometryError(
            f"jitter_amplitude {t.jitter_amplitude:.4g} exceeds 5% of shape diagonal {diag:.4g}")

    modes = None
    if t.jitter_amplitude > 0 and diag > 0:
        # field parameters depend on the scaled shape so both mesh and cloud
        # see the identical displacement
        scaled_diag = compute_aabb(ref_pts * t.scale).diagonal
        modes = _jitter_modes(seed, scaled_diag, t.jitter_amplitude)

    rot = _yaw_matrix(t.yaw)

    def _map_points(p: np.ndarray) -> np.ndarray:
        q = p * t.scale
        if modes is not None:
            q = q + _jitter_displacement(q, modes)
        q = q @ rot.T
        return q + t.translation

    out_mesh = None
    if mesh is not None:
        out_mesh = TriMesh(_map_points(mesh.vertices), mesh.faces,
                           mesh.face_part_id, mesh.face_object_id)

    out_cloud = None
    if cloud is not None:
        new_normals = cloud.normals
        if new_normals is not None:
            if np.all(t.scale == t.scale[0]):
                new_normals = new_normals @ rot.T
            else:
                scaled = new_normals / t.scale  # inverse-transpose of diag scale
                lens = np.linalg.norm(scaled, axis=1, keepdims=True)
                new_normals = (scaled / np.where(lens > 0, lens, 1.0)) @ rot.T
        out_cloud = AnnotatedCloud(
            points=_map_points(cloud.points),
            colors=cloud.colors.copy(),
            normals=new_normals,
            object_id=cloud.object_id.copy(),
            part_id=cloud.part_id.copy(),
            label_table=dict(cloud.label_table),
            curvature=None if cloud.curvature is None else cloud.curvature.copy(),
        )
    return out_mesh, out_cloud


def sample_mesh_surface(mesh: TriMesh, n: int, seed: int,
                        palette: Optional[dict] = None,
                        label_table: Optional[dict] = None,
                        default_color=(180, 180, 180)) -> AnnotatedCloud:
    """Uniform area-weighted surface sampling with per-face substreams.

    Faces are chosen proportionally to area from one stream keyed by the seed;
    barycentric coordinates for each face come from a substream keyed by
    (seed, face index), so sampling is reproducible per face regardless of
    evaluation order. Points inherit the face's part/object id and normal.
    """
    if n < 1:
        raise GeometryError("sample count must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if mesh.num_faces == 0 or total <= 0:
        raise GeometryError("no sampleable surface")

    cum = np.cumsum(areas)
    rng = derive_rng(seed, "face-pick")
    picks = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    picks = np.minimum(picks, mesh.num_faces - 1)
    counts = np.bincount(picks, minlength=mesh.num_faces)

    tri = mesh.triangles()
    normals = mesh.face_normals()
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    pid = np.empty(n, dtype=np.int64)
    oid = np.empty(n, dtype=np.int64)
    out = 0
    for f in np.nonzero(counts)[0]:
        c = counts[f]
        uv = derive_rng(seed, "bary", int(f)).random((c, 2))
        over = uv.sum(axis=1) > 1.0
        uv[over] = 1.0 - uv[over]
        v0, v1, v2 = tri[f, 0], tri[f, 1], tri[f, 2]
        pts[out:out + c] = v0 + uv[:, :1] * (v1 - v0) + uv[:, 1:] * (v2 - v0)
        nrm[out:out + c] = normals[f]
        pid[out:out + c] = mesh.face_part_id[f]
        oid[out:out + c] = mesh.face_object_id[f]
        out += c
    assert out == n

    colors = np.empty((n, 3), dtype=np.uint8)
    colors[:] = np.asarray(default_color, dtype=np.uint8)
    if palette:
        for part, rgb in palette.items():
            colors[pid == part] = np.asarray(rgb, dtype=np.uint8)

    if label_table is None:
        label_table = {int(p): f"part_{int(p)}" for p in np.unique(mesh.face_part_id)}
    return AnnotatedCloud(points=pts, colors=colors, normals=nrm,
                          object_id=oid, part_id=pid, label_table=dict(label_table))


def mean_point_spacing(points: np.ndarray, sample_cap: int = 20000) -> float:
    """Typical inter-point spacing (inverse square root of surface density).

    Estimated as twice the mean nearest-neighbor distance over a
    deterministic subsample: for locally uniform surface sampling the
    expected nearest-neighbor distance is half the lattice spacing.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        return 0.0
    if len(pts) > sample_cap:
        step = int(np.ceil(len(pts) / sample_cap))
        query = pts[::step]
    else:
        query = pts
    tree = cKDTree(pts)
    dist, _ = tree.query(query, k=2)
    return float(2.0 * dist[:, 1].mean())


def estimate_normals(cloud: AnnotatedCloud, k: int = 16) -> AnnotatedCloud:
    """PCA normals over each point's k-neighborhood (the point included).

    The normal is the least-eigenvalue eigenvector of the neighborhood
    covariance. Sign: toward +z when the vertical component is decisive
    (|nz| > 0.1), otherwise away from the centroid of the point's object.
    Also fills `curvature` with the surface-variation ratio
    lambda_min / (lambda_0 + lambda_1 + lambda_2).
    """
    n = len(cloud)
    if k < 3:
        raise GeometryError("neighbor count k must be >= 3")
    if n < k:
        raise GeometryError(f"need at least k={k} points, have {n}")

    tree = cKDTree(cloud.points)
    normals = np.empty((n, 3))
    curvature = np.empty(n)
    chunk = 65536
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        _, idx = tree.query(cloud.points[start:stop], k=k)
        hood = cloud.points[idx]                      # (m, k, 3)
        centered = hood - hood.mean(axis=1, keepdims=True)
        cov = np.einsum("mki,mkj->mij", centered, centered) / k
        evals, evecs = np.linalg.eigh(cov)            # ascending eigenvalues
        normals[start:stop] = evecs[:, :, 0]
        sums = evals.sum(axis=1)
        curvature[start:stop] = np.where(sums > 0, evals[:, 0] / np.where(sums > 0, sums, 1.0), 0.0)

    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= np.where(lens > 0, lens, 1.0)

    # sign disambiguation
    flip = np.zeros(n, dtype=bool)
    vertical = normals[:, 2]
    decisive = np.abs(vertical) > 0.1
    flip[decisive] = vertical[decisive] < 0
    if np.any(~decisive):
        centroids = {}
        for obj in np.unique(cloud.object_id):
            centroids[obj] = cloud.points[cloud.object_id == obj].mean(axis=0)
        amb = np.nonzero(~decisive)[0]
        cent = np.stack([centroids[o] for o in cloud.object_id[amb]])
        outward = np.einsum("ij,ij->i", normals[amb], cloud.points[amb] - cent)
        flip[amb] = outward < 0
    normals[flip] *= -1.0

    return replace(cloud, normals=normals, curvature=curvature)
