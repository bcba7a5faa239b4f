"""View planning and software rasterization.

Cameras follow a pinhole model with z-up world coordinates. Pixels are
sampled at integer coordinates (u, v) with u along columns and v along rows,
so looking up the pixel of a projected point is plain nearest-integer
rounding. Rendering is a serial z-buffer rasterizer (numba-compiled) with
back-face culling disabled and ties on depth resolved toward the lower part
id, which makes buffers bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit
from PIL import Image

from .geometry import AABB, AnnotatedCloud, GeometryError, TriMesh, as_vec3

DEFAULT_RESOLUTION = (1024, 1024)
DEFAULT_FOV = math.radians(60.0)
DEFAULT_NEAR = 0.05
BACKGROUND_COLOR = (255, 255, 255)


class RenderError(ValueError):
    pass


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    vertical_fov: float = DEFAULT_FOV
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    near: float = DEFAULT_NEAR
    far: float = 100.0
    grid_cell: tuple[int, int] = (0, 0)
    kind: str = "centroid"  # centroid | far_corner | orbit

    def __post_init__(self):
        self.position = as_vec3(self.position)
        self.look_at = as_vec3(self.look_at)
        self.up = as_vec3(self.up)
        if np.allclose(self.position, self.look_at):
            raise RenderError("camera position must differ from look_at")
        if not (0.0 < self.near < self.far):
            raise RenderError("need 0 < near < far")
        if not (0.0 < self.vertical_fov < math.pi):
            raise RenderError("vertical_fov must be in (0, pi)")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        self.grid_cell = (int(self.grid_cell[0]), int(self.grid_cell[1]))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) orthonormal frame; falls back to a +y up hint
        when the view direction is vertical."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return right, true_up, fwd

    @property
    def focal_px(self) -> float:
        return (self.resolution[1] / 2.0) / math.tan(self.vertical_fov / 2.0)

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "vertical_fov": self.vertical_fov,
            "resolution": list(self.resolution),
            "near": self.near,
            "far": self.far,
            "grid_cell": list(self.grid_cell),
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["position"]), np.array(d["look_at"]), np.array(d["up"]),
                   d["vertical_fov"], tuple(d["resolution"]), d["near"], d["far"],
                   tuple(d["grid_cell"]), d.get("kind", "centroid"))


@dataclass
class GridDecomposition:
    """3x3 decomposition of the scene footprint (xy plane)."""
    aabb: AABB
    rows: int = 3
    cols: int = 3

    def __post_init__(self):
        size = self.aabb.size
        # degenerate footprints get a symmetric pad so cells stay well defined
        pad = np.where(size[:2] < 1e-9, 0.5, 0.0)
        self._min = self.aabb.min[:2] - pad
        self._size = np.maximum(size[:2] + 2 * pad, 1e-9)

    def cell_of_points(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        rel = (xy - self._min) / self._size
        i = np.clip((rel[:, 0] * self.cols).astype(np.int64), 0, self.cols - 1)
        j = np.clip((rel[:, 1] * self.rows).astype(np.int64), 0, self.rows - 1)
        return i, j

    def cell_of_point(self, p) -> tuple[int, int]:
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        i, j = self.cell_of_points(p[:2][None])
        return int(i[0]), int(j[0])

    def cell_center_xy(self, i: int, j: int) -> np.ndarray:
        return self._min + self._size * [(i + 0.5) / self.cols, (j + 0.5) / self.rows]

    @property
    def cell_size(self) -> np.ndarray:
        return self._size / [self.cols, self.rows]

    def footprint_corners(self) -> np.ndarray:
        x0, y0 = self._min
        x1, y1 = self._min + self._size
        return np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])


@dataclass
class ViewBundle:
    camera: Camera
    color: np.ndarray               # (H, W, 3) uint8
    part_id: np.ndarray             # (H, W) int32, 0 = background
    object_id: Optional[np.ndarray]  # (H, W) int32 or None when loaded from disk
    depth: np.ndarray               # (H, W) float64, +inf = empty

    def __post_init__(self):
        h, w = self.depth.shape
        if self.part_id.shape != (h, w) or self.color.shape != (h, w, 3):
            raise RenderError("view buffers must share dimensions")
        if self.object_id is not None and self.object_id.shape != (h, w):
            raise RenderError("view buffers must share dimensions")


# ------------------------------------------------------------- view planning

_CELL_EXTRA_TARGETS = {"corner": 1, "side": 2, "center": 4}


def _cell_class(i: int, j: int) -> str:
    if i == 1 and j == 1:
        return "center"
    if i in (0, 2) and j in (0, 2):
        return "corner"
    return "side"


def plan_room_tour(aabb: AABB, cloud: AnnotatedCloud,
                   resolution=DEFAULT_RESOLUTION, vertical_fov=DEFAULT_FOV,
                   near=DEFAULT_NEAR, far: Optional[float] = None) -> list[Camera]:
    """25 cameras over the 3x3 footprint grid.

    Each cell gets one camera above its center aimed at the centroid of the
    cell's points (cell midpoint if empty). Corner cells add 1, side cells 2
    and the center cell 4 cameras aimed at the farthest footprint corners of
    the scene at floor height, all from the same spot above the cell.
    """
    if len(cloud) == 0:
        raise RenderError("cannot plan a tour over an empty cloud")
    grid = GridDecomposition(aabb)
    if far is None:
        far = 2.0 * max(aabb.diagonal, 1.0)
    ci, cj = grid.cell_of_points(cloud.points[:, :2])
    floor_z = float(aabb.min[2])
    mid_z = float(0.5 * (aabb.min[2] + aabb.max[2]))
    corners = grid.footprint_corners()

    cameras: list[Camera] = []
    for i in range(3):
        for j in range(3):
            center = grid.cell_center_xy(i, j)
            cell_diag = float(np.hypot(*grid.cell_size))
            pos = np.array([center[0], center[1],
                            aabb.max[2] + 0.6 * cell_diag])
            members = (ci == i) & (cj == j)
            if members.any():
                target = cloud.points[members].mean(axis=0)
            else:
                target = np.array([center[0], center[1], mid_z])
            cameras.append(Camera(pos, target, vertical_fov=vertical_fov,
                                  resolution=resolution, near=near, far=far,
                                  grid_cell=(i, j), kind="centroid"))
            # corner cameras alternate between a low height (shallow
            # room-crossing rays that reach under tables and seats) and a
            # higher one (clears intervening furniture), complementing the
            # steep centroid views
            k = _CELL_EXTRA_TARGETS[_cell_class(i, j)]
            d2 = np.sum((corners - center) ** 2, axis=1)
            order = sorted(range(4), key=lambda c: (-d2[c], c))
            for n_extra, c in enumerate(order[:k]):
                rel_h = 0.1 if n_extra % 2 == 0 else 0.45
                corner_pos = np.array([center[0], center[1],
                                       aabb.max[2] + rel_h * cell_diag])
                target = np.array([corners[c][0], corners[c][1], floor_z])
                cameras.append(Camera(corner_pos, target, vertical_fov=vertical_fov,
                                      resolution=resolution, near=near, far=far,
                                      grid_cell=(i, j), kind="far_corner"))
    assert len(cameras) == 25
    return cameras


def plan_global_snap(aabb: AABB, n: int,
                     resolution=DEFAULT_RESOLUTION, vertical_fov=DEFAULT_FOV,
                     near=DEFAULT_NEAR, far: Optional[float] = None) -> list[Camera]:
    """n cameras on a horizontal circle at the scene top, all aimed at the
    scene center."""
    if n < 1:
        raise RenderError("need at least one camera")
    if far is None:
        far = 4.0 * max(aabb.diagonal, 1.0)
    grid = GridDecomposition(aabb)
    center = aabb.center
    radius = 0.75 * aabb.diagonal
    cameras = []
    for k in range(n):
        ang = 2.0 * math.pi * k / n
        pos = np.array([center[0] + radius * math.cos(ang),
                        center[1] + radius * math.sin(ang),
                        aabb.max[2]])
        clamped = np.clip(pos[:2], aabb.min[:2], aabb.max[:2])
        cameras.append(Camera(pos, center, vertical_fov=vertical_fov,
                              resolution=resolution, near=near, far=far,
                              grid_cell=grid.cell_of_point(clamped), kind="orbit"))
    return cameras


# ---------------------------------------------------------------- projection

def project_points(camera: Camera, points: np.ndarray):
    """Vectorized pinhole projection.

    Returns (uv (N,2) float64, depth (N,) float64, in_front bool). Points at
    or behind the camera plane have in_front False and undefined uv.
    """
    right, up, fwd = camera.basis()
    d = np.asarray(points, dtype=np.float64).reshape(-1, 3) - camera.position
    x = d @ right
    y = d @ up
    z = d @ fwd
    in_front = z > 0
    zsafe = np.where(in_front, z, 1.0)
    w, h = camera.resolution
    f = camera.focal_px
    uv = np.stack([w / 2.0 + f * x / zsafe, h / 2.0 - f * y / zsafe], axis=1)
    return uv, z, in_front


def project_point(camera: Camera, p):
    """Single-point projection; None signals behind-camera (or at the
    camera position, where the direction is undefined)."""
    p = as_vec3(p)
    if np.array_equal(p, camera.position):
        return None
    uv, z, ok = project_points(camera, p[None])
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject_pixel(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    right, up, fwd = camera.basis()
    w, h = camera.resolution
    f = camera.focal_px
    x = (u - w / 2.0) / f
    y = (h / 2.0 - v) / f
    return camera.position + depth * (fwd + x * right + y * up)


def pixel_of(uv: np.ndarray) -> np.ndarray:
    """Nearest-integer pixel for continuous image coordinates."""
    return np.rint(uv).astype(np.int64)


# -------------------------------------------------------------- rasterizer

@njit(cache=True)
def _fill_triangle(x0, y0, iz0, x1, y1, iz1, x2, y2, iz2, pid, oid,
                   width, height, far, depth, part, obj):
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    if area == 0.0:
        return
    minx = min(x0, min(x1, x2))
    maxx = max(x0, max(x1, x2))
    miny = min(y0, min(y1, y2))
    maxy = max(y0, max(y1, y2))
    ix0 = max(0, int(math.ceil(minx)))
    ix1 = min(width - 1, int(math.floor(maxx)))
    iy0 = max(0, int(math.ceil(miny)))
    iy1 = min(height - 1, int(math.floor(maxy)))
    if ix0 > ix1 or iy0 > iy1:
        return
    pos = area > 0.0
    for j in range(iy0, iy1 + 1):
        fj = float(j)
        for i in range(ix0, ix1 + 1):
            fi = float(i)
            w0 = (x2 - x1) * (fj - y1) - (y2 - y1) * (fi - x1)
            w1 = (x0 - x2) * (fj - y2) - (y0 - y2) * (fi - x2)
            w2 = (x1 - x0) * (fj - y0) - (y1 - y0) * (fi - x0)
            if pos:
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
            else:
                if w0 > 0.0 or w1 > 0.0 or w2 > 0.0:
                    continue
            one_over_z = (w0 * iz0 + w1 * iz1 + w2 * iz2) / area
            if one_over_z <= 0.0:
                continue
            d = 1.0 / one_over_z
            if d > far:
                continue
            cur = depth[j, i]
            if d < cur or (d == cur and pid < part[j, i]):
                depth[j, i] = d
                part[j, i] = pid
                obj[j, i] = oid


@njit(cache=True)
def _raster_mesh(vx, vy, vz, faces, face_part, face_obj,
                 width, height, focal, near, far, depth, part, obj):
    cx = width * 0.5
    cy = height * 0.5
    px = np.empty(4)
    py = np.empty(4)
    pz = np.empty(4)
    sx = np.empty(4)
    sy = np.empty(4)
    siz = np.empty(4)
    for t in range(faces.shape[0]):
        # clip against the near plane; a triangle yields up to 4 vertices
        n_poly = 0
        for e in range(3):
            a = faces[t, e]
            b = faces[t, (e + 1) % 3]
            az = vz[a]
            bz = vz[b]
            a_in = az >= near
            if a_in:
                px[n_poly] = vx[a]
                py[n_poly] = vy[a]
                pz[n_poly] = az
                n_poly += 1
            if a_in != (bz >= near):
                s = (near - az) / (bz - az)
                px[n_poly] = vx[a] + s * (vx[b] - vx[a])
                py[n_poly] = vy[a] + s * (vy[b] - vy[a])
                pz[n_poly] = near
                n_poly += 1
        if n_poly < 3:
            continue
        for i in range(n_poly):
            sx[i] = cx + focal * px[i] / pz[i]
            sy[i] = cy - focal * py[i] / pz[i]
            siz[i] = 1.0 / pz[i]
        pid = face_part[t]
        oid = face_obj[t]
        for k in range(1, n_poly - 1):
            _fill_triangle(sx[0], sy[0], siz[0], sx[k], sy[k], siz[k],
                           sx[k + 1], sy[k + 1], siz[k + 1], pid, oid,
                           width, height, far, depth, part, obj)


def render_view(mesh: TriMesh, palette: dict, camera: Camera) -> ViewBundle:
    """Perspective z-buffer rasterization of every triangle (no culling).

    Covered pixels record the nearest surface's depth, part id, object id
    and flat palette color; ties on depth go to the lower part id.
    """
    w, h = camera.resolution
    depth = np.full((h, w), np.inf)
    part = np.zeros((h, w), dtype=np.int32)
    obj = np.zeros((h, w), dtype=np.int32)
    if mesh.num_faces:
        right, up, fwd = camera.basis()
        d = mesh.vertices - camera.position
        _raster_mesh(np.ascontiguousarray(d @ right), np.ascontiguousarray(d @ up),
                     np.ascontiguousarray(d @ fwd),
                     mesh.faces, mesh.face_part_id.astype(np.int32),
                     mesh.face_object_id.astype(np.int32),
                     w, h, camera.focal_px, camera.near, camera.far,
                     depth, part, obj)

    max_pid = int(part.max())
    lut = np.empty((max_pid + 1, 3), dtype=np.uint8)
    lut[:] = BACKGROUND_COLOR
    for pid, rgb in palette.items():
        if 0 < pid <= max_pid:
            lut[pid] = rgb
    color = lut[part]
    return ViewBundle(camera=camera, color=color, part_id=part,
                      object_id=obj, depth=depth)


# -------------------------------------------------------------- visibility

def default_visibility_epsilon(scene_diagonal: float,
                               resolution: tuple[int, int] = DEFAULT_RESOLUTION,
                               vertical_fov: float = DEFAULT_FOV) -> float:
    """Depth slack for the pixel-lookup visibility test.

    The floor term covers sampling noise on surfaces; the second term covers
    the depth ramp across half a pixel on oblique surfaces, which scales with
    the pixel footprint at scene range (diagonal x fov / rows).
    """
    base = 1e-2 * scene_diagonal / 10.0
    pixel_term = 3.0 * scene_diagonal * math.tan(vertical_fov / 2.0) / resolution[1]
    return max(base, pixel_term)


def compute_visibility(cloud: AnnotatedCloud, view: ViewBundle,
                       epsilon: float) -> np.ndarray:
    """Per-point boolean: projects into the image, in front of the camera,
    and no rendered surface is more than epsilon closer at its pixel."""
    uv, z, in_front = project_points(view.camera, cloud.points)
    w, h = view.camera.resolution
    px = pixel_of(uv)
    inside = in_front & (px[:, 0] >= 0) & (px[:, 0] < w) \
        & (px[:, 1] >= 0) & (px[:, 1] < h)
    vis = np.zeros(len(cloud), dtype=bool)
    idx = np.nonzero(inside)[0]
    if len(idx):
        d_buf = view.depth[px[idx, 1], px[idx, 0]]
        vis[idx] = z[idx] <= d_buf + epsilon
    return vis


# ------------------------------------------------------------------ storage

def save_view_bundle(directory, index: int, view: ViewBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(view.color, mode="RGB").save(directory / f"{index}.png")
    part16 = view.part_id.astype(np.uint16)
    if np.any(view.part_id > 0xFFFF):
        raise RenderError("part id exceeds 16-bit range of the view export")
    Image.fromarray(part16).save(directory / f"{index}.part.png")
    depth32 = view.depth.astype("<f4")
    depth32.tofile(directory / f"{index}.depth.bin")
    with open(directory / f"{index}.camera.json", "w", encoding="utf-8") as f:
        json.dump(view.camera.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_view_bundle(directory, index: int) -> ViewBundle:
    directory = Path(directory)
    with open(directory / f"{index}.camera.json", "r", encoding="utf-8") as f:
        camera = Camera.from_dict(json.load(f))
    w, h = camera.resolution
    color = np.asarray(Image.open(directory / f"{index}.png").convert("RGB"))
    part = np.asarray(Image.open(directory / f"{index}.part.png")).astype(np.int32)
    depth = np.fromfile(directory / f"{index}.depth.bin", dtype="<f4")
    depth = depth.reshape(h, w).astype(np.float64)
    return ViewBundle(camera=camera, color=color, part_id=part,
                      object_id=None, depth=depth)


def save_views(directory, views: list[ViewBundle]) -> None:
    for k, v in enumerate(views):
        save_view_bundle(directory, k, v)


def load_views(directory) -> list[ViewBundle]:
    directory = Path(directory)
    indices = sorted(int(p.name.split(".")[0]) for p in directory.glob("*.camera.json")
                     if p.name.split(".")[0].isdigit())
    if not indices:
        raise RenderError(f"no views in {directory}")
    return [load_view_bundle(directory, k) for k in indices]
