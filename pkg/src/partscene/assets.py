"""Procedural part-annotated demo shapes and the demo shape library writer.

Shapes are low-poly box/cylinder assemblies with one part instance per
structural element (legs, handles, boards, ...). Downward faces that can
never be seen by cameras placed above the scene (undersides, floor contact)
are omitted so that sampled points stay visible from tour cameras.

Run `python -m partscene.assets <dir>` to materialize a library on disk.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .geometry import TriMesh
from .io import write_obj_with_sidecar
from .util import derive_rng

ALL_BOX_FACES = ("+x", "-x", "+y", "-y", "+z", "-z")
SIDE_FACES = ("+x", "-x", "+y", "-y")
NO_BOTTOM = ("+x", "-x", "+y", "-y", "+z")


class _ShapeBuilder:
    """Accumulates labeled primitive geometry into one TriMesh."""

    def __init__(self):
        self.verts: list = []
        self.faces: list = []
        self.face_part: list = []
        self.labels: dict[int, str] = {}
        self._next_part = 1

    def new_part(self, label: str) -> int:
        pid = self._next_part
        self._next_part += 1
        self.labels[pid] = label
        return pid

    def add(self, pid: int, verts: np.ndarray, faces: np.ndarray):
        base = len(self.verts)
        self.verts.extend(np.asarray(verts, dtype=np.float64))
        for f in np.asarray(faces, dtype=np.int64):
            self.faces.append(f + base)
            self.face_part.append(pid)

    def box(self, pid: int, center, size, include=NO_BOTTOM):
        """Axis-aligned box; `include` picks which of the six faces exist.
        Faces that could never be seen (undersides, interior walls) are left
        out by the recipes so sampled points stay camera-visible."""
        cx, cy, cz = center
        hx, hy, hz = np.asarray(size, dtype=np.float64) / 2.0
        v = np.array([
            [cx - hx, cy - hy, cz - hz], [cx + hx, cy - hy, cz - hz],
            [cx + hx, cy + hy, cz - hz], [cx - hx, cy + hy, cz - hz],
            [cx - hx, cy - hy, cz + hz], [cx + hx, cy - hy, cz + hz],
            [cx + hx, cy + hy, cz + hz], [cx - hx, cy + hy, cz + hz],
        ])
        quads = {
            "-z": (0, 3, 2, 1), "+z": (4, 5, 6, 7),
            "-y": (0, 1, 5, 4), "+y": (2, 3, 7, 6),
            "-x": (0, 4, 7, 3), "+x": (1, 2, 6, 5),
        }
        faces = []
        for name in include:
            a, b, c, d = quads[name]
            faces.append([a, b, c])
            faces.append([a, c, d])
        self.add(pid, v, np.array(faces))

    def sheet(self, pid: int, center, axis: str, size2):
        """Single two-triangle rectangle perpendicular to `axis` ('x'|'y'|'z').
        Being one sheet, its samples are visible from either side, which keeps
        thin features (legs, panels) fully covered by the tour cameras."""
        cx, cy, cz = center
        a, b = np.asarray(size2, dtype=np.float64) / 2.0
        if axis == "x":
            v = np.array([[cx, cy - a, cz - b], [cx, cy + a, cz - b],
                          [cx, cy + a, cz + b], [cx, cy - a, cz + b]])
        elif axis == "y":
            v = np.array([[cx - a, cy, cz - b], [cx + a, cy, cz - b],
                          [cx + a, cy, cz + b], [cx - a, cy, cz + b]])
        else:
            v = np.array([[cx - a, cy - b, cz], [cx + a, cy - b, cz],
                          [cx + a, cy + b, cz], [cx - a, cy + b, cz]])
        self.add(pid, v, np.array([[0, 1, 2], [0, 2, 3]]))

    def cross_column(self, pid: int, center_xy, z0, z1, width):
        """Two perpendicular vertical sheets forming a +-profile column."""
        cx, cy = center_xy
        zc = (z0 + z1) / 2.0
        h = z1 - z0
        self.sheet(pid, (cx, cy, zc), "x", (width, h))
        self.sheet(pid, (cx, cy, zc), "y", (width, h))

    def frustum(self, pid: int, center_xy, z0, z1, r0, r1, n=12,
                top_cap=False, bottom_cap=False):
        """n-sided tube from radius r0 at z0 to r1 at z1 (cylinder when r0==r1)."""
        cx, cy = center_xy
        ang = 2.0 * np.pi * np.arange(n) / n
        ring0 = np.stack([cx + r0 * np.cos(ang), cy + r0 * np.sin(ang),
                          np.full(n, z0)], axis=1)
        ring1 = np.stack([cx + r1 * np.cos(ang), cy + r1 * np.sin(ang),
                          np.full(n, z1)], axis=1)
        verts = [ring0, ring1]
        faces = []
        for i in range(n):
            j = (i + 1) % n
            faces.append([i, j, n + j])
            faces.append([i, n + j, n + i])
        extra = 2 * n
        if top_cap and r1 > 0:
            verts.append(np.array([[cx, cy, z1]]))
            for i in range(n):
                faces.append([n + i, n + (i + 1) % n, extra])
            extra += 1
        if bottom_cap and r0 > 0:
            verts.append(np.array([[cx, cy, z0]]))
            for i in range(n):
                faces.append([(i + 1) % n, i, extra])
        self.add(pid, np.concatenate(verts), np.array(faces))

    def build(self) -> tuple[TriMesh, dict[int, str]]:
        mesh = TriMesh(np.array(self.verts), np.array(self.faces),
                       np.array(self.face_part), np.ones(len(self.faces), dtype=np.int64))
        return mesh.drop_degenerate_faces(), dict(self.labels)


# ------------------------------------------------------------ shape recipes

def make_table(rng: np.random.Generator):
    b = _ShapeBuilder()
    w = rng.uniform(1.2, 1.8)
    d = rng.uniform(0.7, 1.1)
    h = rng.uniform(0.68, 0.78)
    t = 0.04
    leg = 0.08
    b.box(b.new_part("top"), (0, 0, h - t / 2), (w, d, t), include=NO_BOTTOM)
    inset = leg * 0.9
    for sx in (-1, 1):
        for sy in (-1, 1):
            pid = b.new_part("leg")
            b.cross_column(pid, (sx * (w / 2 - inset), sy * (d / 2 - inset)),
                           0.0, h - t, leg)
    return b.build()


def make_chair(rng: np.random.Generator):
    b = _ShapeBuilder()
    w = rng.uniform(0.42, 0.5)
    d = rng.uniform(0.42, 0.5)
    seat_h = rng.uniform(0.42, 0.48)
    t = 0.05
    back_h = rng.uniform(0.4, 0.52)
    leg = 0.06
    b.box(b.new_part("seat"), (0, 0, seat_h - t / 2), (w, d, t), include=NO_BOTTOM)
    b.sheet(b.new_part("back"), (0, d / 2 - t / 2, seat_h + back_h / 2),
            "y", (w, back_h))
    inset = leg * 0.9
    for sx in (-1, 1):
        for sy in (-1, 1):
            pid = b.new_part("leg")
            b.cross_column(pid, (sx * (w / 2 - inset), sy * (d / 2 - inset)),
                           0.0, seat_h - t, leg)
    return b.build()


def make_shelf(rng: np.random.Generator):
    b = _ShapeBuilder()
    w = rng.uniform(0.8, 1.2)
    d = rng.uniform(0.28, 0.38)
    h = rng.uniform(1.4, 1.8)
    t = 0.035
    n_boards = int(rng.integers(3, 5))
    # side panels expose only their outer face and top edge; the inner face
    # would be hidden behind the boards most of the time
    b.box(b.new_part("side"), (-(w / 2 - t / 2), 0, h / 2), (t, d, h),
          include=("-x", "+z"))
    b.box(b.new_part("side"), (w / 2 - t / 2, 0, h / 2), (t, d, h),
          include=("+x", "+z"))
    for i in range(n_boards):
        z = h * (i + 1) / (n_boards + 1)
        pid = b.new_part("board")
        b.box(pid, (0, 0, z), (w - 2 * t, d, t),
              include=("+y", "-y", "+z"))
    return b.build()


def make_cabinet(rng: np.random.Generator):
    """Front (doors, handles) faces local -y. Sides and back are open: a
    cabinet usually stands against a wall, where side sheets could never be
    seen by any camera and would only produce dead sample points."""
    b = _ShapeBuilder()
    w = rng.uniform(0.8, 1.1)
    d = rng.uniform(0.4, 0.55)
    h = rng.uniform(0.8, 1.1)
    t = 0.03
    body = b.new_part("body")
    b.sheet(body, (0, 0, h - t / 2), "z", (w, d))
    b.sheet(body, (-(w / 2 - t / 2), -(d / 2 - t / 2), (h - t) / 2), "y", (t * 2, h - t))
    b.sheet(body, (w / 2 - t / 2, -(d / 2 - t / 2), (h - t) / 2), "y", (t * 2, h - t))
    # seam wide enough that the two doors stay distinct superpoint components
    door_w = (w - 2 * t) / 2
    for sx in (-1, 1):
        b.sheet(b.new_part("door"), (sx * door_w / 2, -(d / 2 - t / 2), (h - t) / 2),
                "y", (door_w - 0.06, h - t))
        b.box(b.new_part("handle"),
              (sx * 0.05, -(d / 2 + 0.018), h * 0.55),
              (0.02, 0.035, 0.1), include=ALL_BOX_FACES)
    return b.build()


def make_door(rng: np.random.Generator):
    b = _ShapeBuilder()
    w = rng.uniform(0.85, 1.0)
    h = rng.uniform(1.95, 2.1)
    t = 0.05
    frame = b.new_part("frame")
    b.cross_column(frame, (-(w / 2 + t / 2), 0), 0.0, h, t * 1.6)
    b.cross_column(frame, (w / 2 + t / 2, 0), 0.0, h, t * 1.6)
    b.sheet(frame, (0, 0, h + t / 2), "y", (w + 2 * t, t))
    b.sheet(b.new_part("panel"), (0, 0, h / 2 - 0.005), "y", (w, h - 0.01))
    b.box(b.new_part("handle"), (w / 2 - 0.09, 0.045, 1.0),
          (0.12, 0.05, 0.035), include=ALL_BOX_FACES)
    return b.build()


def make_lamp(rng: np.random.Generator):
    b = _ShapeBuilder()
    base_r = rng.uniform(0.1, 0.14)
    pole_h = rng.uniform(1.1, 1.5)
    b.frustum(b.new_part("base"), (0, 0), 0.0, 0.04, base_r, base_r, n=10, top_cap=True)
    b.frustum(b.new_part("pole"), (0, 0), 0.04, pole_h, 0.024, 0.024, n=8)
    # short, wide-mouthed shade: the inside stays visible from the overhead
    # cameras so the wall-facing half is never fully dark
    shade_r = rng.uniform(0.16, 0.2)
    b.frustum(b.new_part("shade"), (0, 0), pole_h, pole_h + 0.16,
              shade_r, shade_r * 0.8, n=12)
    return b.build()


def make_mug(rng: np.random.Generator):
    b = _ShapeBuilder()
    r = rng.uniform(0.038, 0.05)
    h = rng.uniform(0.09, 0.12)
    b.frustum(b.new_part("body"), (0, 0), 0.0, h, r, r, n=10, top_cap=True)
    # flat C-profile handle in the radial plane
    handle = b.new_part("handle")
    b.sheet(handle, (r + 0.028, 0, h * 0.5), "y", (0.016, h * 0.55))
    b.sheet(handle, (r + 0.014, 0, h * 0.775), "y", (0.028, 0.014))
    b.sheet(handle, (r + 0.014, 0, h * 0.225), "y", (0.028, 0.014))
    return b.build()


def make_monitor(rng: np.random.Generator):
    b = _ShapeBuilder()
    w = rng.uniform(0.45, 0.6)
    sh = w * 9 / 16
    b.box(b.new_part("base"), (0, 0, 0.01), (0.22, 0.16, 0.02), include=NO_BOTTOM)
    b.cross_column(b.new_part("stand"), (0, 0.02), 0.02, 0.16, 0.05)
    b.sheet(b.new_part("screen"), (0, 0.03, 0.16 + sh / 2), "y", (w, sh))
    return b.build()


def make_plant(rng: np.random.Generator):
    b = _ShapeBuilder()
    pot_r = rng.uniform(0.07, 0.1)
    pot_h = rng.uniform(0.1, 0.14)
    b.frustum(b.new_part("pot"), (0, 0), 0.0, pot_h, pot_r * 0.8, pot_r,
              n=10, top_cap=True)
    # foliage stays narrower than the pot rim so the pot is not shadowed
    # from the overhead cameras
    foliage = b.new_part("foliage")
    fr = pot_r * rng.uniform(0.75, 0.95)
    b.box(foliage, (0, 0, pot_h + fr * 1.1), (fr * 1.6, fr * 1.6, fr * 2.2),
          include=NO_BOTTOM)
    b.box(foliage, (0, 0, pot_h + fr * 2.8), (fr * 1.1, fr * 1.1, fr * 1.2),
          include=NO_BOTTOM)
    return b.build()


def make_crate(rng: np.random.Generator):
    b = _ShapeBuilder()
    s = rng.uniform(0.22, 0.3)
    h = s * rng.uniform(0.6, 0.8)
    # cross-profile body instead of a closed tube: tube walls facing away
    # from every camera would never be seen
    b.cross_column(b.new_part("body"), (0, 0), 0.0, h, s)
    b.box(b.new_part("lid"), (0, 0, h + 0.012), (s * 1.05, s * 1.05, 0.024),
          include=NO_BOTTOM)
    return b.build()


# category -> (recipe, size tier, can other objects rest on its top)
SHAPE_RECIPES = {
    "table": (make_table, "large", True),
    "shelf": (make_shelf, "large", True),
    "cabinet": (make_cabinet, "large", True),
    "door": (make_door, "large", False),
    "chair": (make_chair, "medium", False),
    "lamp": (make_lamp, "medium", False),
    "mug": (make_mug, "small", False),
    "monitor": (make_monitor, "small", False),
    "plant": (make_plant, "small", False),
    "crate": (make_crate, "small", False),
}


def build_demo_shape(category: str, seed: int):
    """One (TriMesh, labels, size_tier, supports) variant of a known category."""
    recipe, tier, supports = SHAPE_RECIPES[category]
    mesh, labels = recipe(derive_rng(seed, "shape", category))
    return mesh, labels, tier, supports


def write_demo_library(root, seed: int = 0, variants: int = 3) -> list[str]:
    """Write OBJ+sidecar shape files for every recipe; returns shape ids."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shape_ids = []
    for category in sorted(SHAPE_RECIPES):
        for v in range(variants):
            shape_id = f"{category}_{v:02d}"
            mesh, labels, tier, supports = build_demo_shape(
                category, derive_rng(seed, shape_id).integers(2**31))
            write_obj_with_sidecar(
                mesh, labels, root / f"{shape_id}.obj",
                extra_meta={"shape_id": shape_id, "category": category,
                            "size_tier": tier, "supports": supports})
            shape_ids.append(shape_id)
    return shape_ids


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print("usage: python -m partscene.assets <output-dir> [seed] [variants]",
              file=sys.stderr)
        return 1
    seed = int(argv[1]) if len(argv) > 1 else 0
    variants = int(argv[2]) if len(argv) > 2 else 3
    ids = write_demo_library(argv[0], seed=seed, variants=variants)
    print(f"wrote {len(ids)} shapes to {argv[0]}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
