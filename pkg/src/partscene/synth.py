"""Scene assembly: shape library, layouts, manifests, queries, splits.

A scene is built in two phases: `generate_scene` makes every random choice
and records it in a SceneManifest; `synthesize_from_manifest` replays the
manifest into concrete geometry. Replaying is the only path that produces
geometry, so a saved manifest always reproduces its scene bit for bit.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (AABB, AnnotatedCloud, PlacementTransform, TIER_POINTS,
                       TriMesh, apply_placement, compute_aabb, sample_mesh_surface)
from .io import read_cloud_ply, read_mesh_ply, read_obj_with_sidecar, \
    write_cloud_ply, write_mesh_ply
from .util import derive_rng, derive_seed, dump_json, load_json

log = logging.getLogger(__name__)


class SynthError(ValueError):
    pass


@dataclass
class ShapeRecord:
    shape_id: str
    category: str
    size_tier: str
    mesh: TriMesh
    part_labels: dict[int, str]
    supports_objects: bool = False  # small objects may rest on its AABB top

    def __post_init__(self):
        if self.size_tier not in TIER_POINTS:
            raise SynthError(f"{self.shape_id}: unknown size_tier '{self.size_tier}'")
        if not self.part_labels:
            raise SynthError(f"{self.shape_id}: empty part_labels")


@dataclass
class LayoutPlacement:
    category: str
    position: np.ndarray
    yaw: float
    required: bool = True


@dataclass
class Layout:
    layout_id: str
    room_extent: AABB
    placements: list[LayoutPlacement]

    def __post_init__(self):
        for p in self.placements:
            if not p.category:
                raise SynthError(f"layout {self.layout_id}: empty category")
            if not self.room_extent.contains_xy(p.position[0], p.position[1]):
                raise SynthError(
                    f"layout {self.layout_id}: placement of '{p.category}' at "
                    f"{p.position[:2].tolist()} outside the room footprint")


def load_layout(path) -> Layout:
    d = load_json(path)
    placements = [
        LayoutPlacement(category=p["category"],
                        position=np.asarray(p["position"], dtype=np.float64),
                        yaw=float(p.get("yaw", 0.0)),
                        required=bool(p.get("required", True)))
        for p in d["placements"]
    ]
    return Layout(layout_id=d["layout_id"],
                  room_extent=AABB.from_dict(d["room_extent"]),
                  placements=placements)


def load_layouts(root) -> list[Layout]:
    root = Path(root)
    paths = sorted(p for p in root.glob("*.json") if p.stem != "implicit_templates")
    layouts = [load_layout(p) for p in paths]
    if not layouts:
        raise SynthError(f"no layout files in {root}")
    return layouts


# ------------------------------------------------------------------ library

@dataclass
class LibraryReport:
    loaded: list[str] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)


def load_shape_library(root) -> tuple[dict[str, ShapeRecord], LibraryReport]:
    """All valid shapes under root (flat `<id>.obj` + `<id>.json` pairs).

    Invalid entries are collected in the report with reasons; zero valid
    shapes or a duplicated shape_id is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise SynthError(f"shape library directory not found: {root}")
    report = LibraryReport()
    library: dict[str, ShapeRecord] = {}
    for obj_path in sorted(root.glob("*.obj")):
        sidecar = obj_path.with_suffix(".json")
        try:
            if not sidecar.exists():
                raise SynthError("missing sidecar JSON")
            meta = load_json(sidecar)
            mesh, labels = read_obj_with_sidecar(obj_path, sidecar)
            record = ShapeRecord(
                shape_id=str(meta.get("shape_id", obj_path.stem)),
                category=str(meta["category"]),
                size_tier=str(meta["size_tier"]),
                mesh=mesh, part_labels=labels,
                supports_objects=bool(meta.get("supports", False)))
            if mesh.num_faces == 0:
                raise SynthError("no non-degenerate faces")
        except (KeyError, ValueError) as exc:
            report.rejected.append((str(obj_path), str(exc)))
            continue
        if record.shape_id in library:
            raise SynthError(f"duplicate shape_id '{record.shape_id}' at {obj_path}")
        library[record.shape_id] = record
        report.loaded.append(record.shape_id)
    if not library:
        raise SynthError(f"no shapes in {root}")
    return library, report


# ------------------------------------------------------------------ manifest

@dataclass
class QuerySpec:
    query_text: str
    kind: str  # direct | implicit
    gt_part_ids: set[int]

    def __post_init__(self):
        if self.kind not in ("direct", "implicit"):
            raise SynthError(f"bad query kind '{self.kind}'")
        self.gt_part_ids = {int(p) for p in self.gt_part_ids}
        if not self.gt_part_ids:
            raise SynthError(f"query '{self.query_text}' has empty gt_part_ids")

    def to_dict(self) -> dict:
        return {"query_text": self.query_text, "kind": self.kind,
                "gt_part_ids": sorted(self.gt_part_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuerySpec":
        return cls(d["query_text"], d["kind"], set(d["gt_part_ids"]))


@dataclass
class PlacedShape:
    shape_id: str
    object_id: int
    transform: PlacementTransform
    jitter_seed: int
    sample_seed: int
    part_id_map: dict[int, int]  # local part id -> global part id

    def to_dict(self) -> dict:
        return {
            "shape_id": self.shape_id,
            "object_id": self.object_id,
            "transform": self.transform.to_dict(),
            "jitter_seed": self.jitter_seed,
            "sample_seed": self.sample_seed,
            "part_id_map": {str(k): v for k, v in self.part_id_map.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacedShape":
        return cls(d["shape_id"], d["object_id"],
                   PlacementTransform.from_dict(d["transform"]),
                   d["jitter_seed"], d["sample_seed"],
                   {int(k): int(v) for k, v in d["part_id_map"].items()})


@dataclass
class SceneManifest:
    scene_id: str
    layout_id: str
    seed: int
    placed_shapes: list[PlacedShape]
    palette: dict[int, tuple[int, int, int]]
    label_table: dict[int, str]
    queries: list[QuerySpec]
    split: str
    tier_points: dict[str, int]
    # room footprint with the content's height: camera planning and the view
    # weight grid both work over this box
    scene_bounds: Optional[AABB] = None

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "layout_id": self.layout_id,
            "seed": self.seed,
            "placed_shapes": [p.to_dict() for p in self.placed_shapes],
            "palette": {str(k): list(v) for k, v in self.palette.items()},
            "label_table": {str(k): v for k, v in self.label_table.items()},
            "queries": [q.to_dict() for q in self.queries],
            "split": self.split,
            "tier_points": self.tier_points,
            "scene_bounds": None if self.scene_bounds is None else self.scene_bounds.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneManifest":
        bounds = d.get("scene_bounds")
        return cls(
            scene_id=d["scene_id"], layout_id=d["layout_id"], seed=d["seed"],
            placed_shapes=[PlacedShape.from_dict(p) for p in d["placed_shapes"]],
            palette={int(k): tuple(v) for k, v in d["palette"].items()},
            label_table={int(k): v for k, v in d["label_table"].items()},
            queries=[QuerySpec.from_dict(q) for q in d["queries"]],
            split=d["split"], tier_points=dict(d["tier_points"]),
            scene_bounds=None if bounds is None else AABB.from_dict(bounds))


def palette_color(seed: int, part_id: int) -> tuple[int, int, int]:
    """Deterministic distinct-ish flat color for one part instance."""
    rng = derive_rng(seed, "palette", part_id)
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.45, 0.9)
    v = rng.uniform(0.45, 0.9)
    r, g, b = colorsys.hsv_to_rgb(h, s, v)
    return int(r * 255), int(g * 255), int(b * 255)


def _transformed_mesh(library: dict, placed: PlacedShape) -> TriMesh:
    shape = library.get(placed.shape_id)
    if shape is None:
        raise SynthError(f"manifest references unknown shape '{placed.shape_id}'")
    mesh = shape.mesh
    global_part = np.array([placed.part_id_map[int(p)] for p in mesh.face_part_id],
                           dtype=np.int64)
    relabeled = TriMesh(mesh.vertices, mesh.faces, global_part,
                        np.full(mesh.num_faces, placed.object_id, dtype=np.int64))
    out, _ = apply_placement(relabeled, None, placed.transform, placed.jitter_seed)
    return out


def synthesize_from_manifest(manifest: SceneManifest, library: dict) \
        -> tuple[TriMesh, AnnotatedCloud]:
    """Replay a manifest into the merged scene mesh and sampled cloud."""
    meshes = []
    clouds = []
    for placed in manifest.placed_shapes:
        shape = library[placed.shape_id]
        mesh = _transformed_mesh(library, placed)
        n = manifest.tier_points[shape.size_tier]
        cloud = sample_mesh_surface(mesh, n, placed.sample_seed,
                                    palette=manifest.palette,
                                    label_table=manifest.label_table)
        meshes.append(mesh)
        clouds.append(cloud)

    offsets = np.cumsum([0] + [m.num_vertices for m in meshes[:-1]])
    merged_mesh = TriMesh(
        np.concatenate([m.vertices for m in meshes]),
        np.concatenate([m.faces + off for m, off in zip(meshes, offsets)]),
        np.concatenate([m.face_part_id for m in meshes]),
        np.concatenate([m.face_object_id for m in meshes]))
    merged_cloud = AnnotatedCloud(
        points=np.concatenate([c.points for c in clouds]),
        colors=np.concatenate([c.colors for c in clouds]),
        normals=np.concatenate([c.normals for c in clouds]),
        object_id=np.concatenate([c.object_id for c in clouds]),
        part_id=np.concatenate([c.part_id for c in clouds]),
        label_table=dict(manifest.label_table))
    return merged_mesh, merged_cloud


def _resolve_placement(base_mesh: TriMesh, scale: np.ndarray, yaw: float,
                       jitter_amplitude: float, jitter_seed: int,
                       anchor_xy: np.ndarray, floor_z: float) \
        -> tuple[PlacementTransform, AABB]:
    """Transform dropping the shape's AABB bottom-center onto (anchor_xy,
    floor_z); returns it with the resulting AABB."""
    probe = PlacementTransform(scale=scale, yaw=yaw, translation=np.zeros(3),
                               jitter_amplitude=jitter_amplitude)
    moved, _ = apply_placement(base_mesh, None, probe, jitter_seed)
    bb = moved.aabb()
    c = bb.center
    translation = np.array([anchor_xy[0] - c[0], anchor_xy[1] - c[1],
                            floor_z - bb.min[2]])
    final = PlacementTransform(scale=scale, yaw=yaw, translation=translation,
                               jitter_amplitude=jitter_amplitude)
    return final, AABB(bb.min + translation, bb.max + translation)


def generate_scene(layout: Layout, library: dict[str, ShapeRecord], seed: int,
                   small_object_count: int = 8,
                   tier_points: Optional[dict[str, int]] = None,
                   implicit_templates: Optional[dict[str, str]] = None,
                   scene_id: Optional[str] = None,
                   split: str = "train") \
        -> tuple[SceneManifest, TriMesh, AnnotatedCloud]:
    """Populate a layout with library shapes plus random small objects.

    Layout placements keep their authored position/yaw; every shape gets a
    per-axis scale jitter of +-10% and a smooth displacement of 1% of its
    diagonal. Small objects go on the floor or on top of already placed
    objects (50/50), with AABB rejection sampling (<=100 tries each).
    """
    if small_object_count < 0:
        raise SynthError("small_object_count must be >= 0")
    tier_points = dict(tier_points or TIER_POINTS)

    by_category: dict[str, list[ShapeRecord]] = {}
    for rec in library.values():
        by_category.setdefault(rec.category, []).append(rec)
    for recs in by_category.values():
        recs.sort(key=lambda r: r.shape_id)

    placed: list[PlacedShape] = []
    placed_aabbs: list[AABB] = []
    placed_required: list[bool] = []
    placed_supports: list[bool] = []
    next_object = 1
    next_part = 1
    label_table: dict[int, str] = {}
    floor_z = float(layout.room_extent.min[2])

    def _commit(shape: ShapeRecord, transform: PlacementTransform, bb: AABB,
                jitter_seed: int, sample_seed: int, required: bool):
        nonlocal next_object, next_part
        part_map = {}
        for local in sorted(shape.part_labels):
            part_map[local] = next_part
            label_table[next_part] = f"{shape.category}_{shape.part_labels[local]}"
            next_part += 1
        placed.append(PlacedShape(
            shape_id=shape.shape_id, object_id=next_object, transform=transform,
            jitter_seed=jitter_seed, sample_seed=sample_seed, part_id_map=part_map))
        next_object += 1
        placed_aabbs.append(bb)
        placed_required.append(required)
        placed_supports.append(shape.supports_objects)

    # layout placements, in authored order
    for idx, pl in enumerate(layout.placements):
        candidates = by_category.get(pl.category, [])
        if not candidates:
            if pl.required:
                raise SynthError(f"no library shape for required category '{pl.category}'")
            log.warning("layout %s: skipping optional '%s' (no shapes)",
                        layout.layout_id, pl.category)
            continue
        rng = derive_rng(seed, "placement", idx)
        shape = candidates[int(rng.integers(len(candidates)))]
        scale = rng.uniform(0.9, 1.1, size=3)
        jitter_amp = 0.01 * shape.mesh.aabb().diagonal
        jitter_seed = derive_seed(seed, "jitter", idx)
        sample_seed = derive_seed(seed, "sample", idx)
        transform, bb = _resolve_placement(shape.mesh, scale, pl.yaw, jitter_amp,
                                           jitter_seed, pl.position[:2], floor_z)
        if not pl.required and any(bb.intersects(other) for other in placed_aabbs):
            log.warning("layout %s: dropping optional '%s' (overlaps)",
                        layout.layout_id, pl.category)
            continue
        _commit(shape, transform, bb, jitter_seed, sample_seed, pl.required)

    for i in range(len(placed)):
        for j in range(i + 1, len(placed)):
            if placed_required[i] and placed_required[j] \
                    and placed_aabbs[i].intersects(placed_aabbs[j]):
                raise SynthError(
                    f"layout {layout.layout_id} defect: required placements "
                    f"{placed[i].shape_id} and {placed[j].shape_id} overlap")

    # random small objects: half on the floor, half on top of support AABBs
    small_shapes = sorted((r for r in library.values() if r.size_tier == "small"),
                          key=lambda r: r.shape_id)
    if small_object_count > 0 and not small_shapes:
        log.warning("no small-tier shapes in library; skipping small objects")
        small_object_count = 0
    for j in range(small_object_count):
        rng = derive_rng(seed, "small", j)
        shape = small_shapes[int(rng.integers(len(small_shapes)))]
        jitter_seed = derive_seed(seed, "small-jitter", j)
        sample_seed = derive_seed(seed, "small-sample", j)
        done = False
        for _attempt in range(100):
            scale = rng.uniform(0.9, 1.1, size=3)
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            supports = [bb for bb, ok in zip(placed_aabbs, placed_supports) if ok]
            on_support = bool(supports) and rng.random() < 0.7
            if on_support:
                sup = supports[int(rng.integers(len(supports)))]
                margin = 0.05
                lo = sup.min[:2] + margin
                hi = sup.max[:2] - margin
                if np.any(lo >= hi):
                    continue
                anchor = rng.uniform(lo, hi)
                z = float(sup.max[2])
            else:
                # central floor band only: objects dropped against walls or
                # under furniture overhangs end up invisible to every camera
                ext = layout.room_extent
                margin = 0.22 * ext.size[:2]
                anchor = rng.uniform(ext.min[:2] + margin, ext.max[:2] - margin)
                z = floor_z
            jitter_amp = 0.01 * shape.mesh.aabb().diagonal
            transform, bb = _resolve_placement(shape.mesh, scale, yaw, jitter_amp,
                                               jitter_seed, anchor, z)
            if any(bb.intersects(other) for other in placed_aabbs):
                continue
            _commit(shape, transform, bb, jitter_seed, sample_seed, False)
            done = True
            break
        if not done:
            log.warning("scene seed %d: dropped small object %d after 100 attempts",
                        seed, j)

    palette = {pid: palette_color(seed, pid) for pid in label_table}
    manifest = SceneManifest(
        scene_id=scene_id or f"scene_{seed:08d}",
        layout_id=layout.layout_id, seed=seed, placed_shapes=placed,
        palette=palette, label_table=label_table, queries=[], split=split,
        tier_points=tier_points)
    manifest.queries = derive_queries(manifest, library, implicit_templates)
    mesh, cloud = synthesize_from_manifest(manifest, library)
    content = cloud.aabb()
    ext = layout.room_extent
    manifest.scene_bounds = AABB(
        np.minimum([ext.min[0], ext.min[1], content.min[2]], content.min),
        np.maximum([ext.max[0], ext.max[1], content.max[2]], content.max))
    return manifest, mesh, cloud


def derive_queries(manifest: SceneManifest, library: dict,
                   implicit_templates: Optional[dict[str, str]] = None) \
        -> list[QuerySpec]:
    """One direct query per distinct object_part label, plus templated
    implicit queries for labels present in the scene."""
    by_label: dict[str, set[int]] = {}
    for pid, label in manifest.label_table.items():
        by_label.setdefault(label, set()).add(pid)
    queries = [QuerySpec(label, "direct", pids)
               for label, pids in sorted(by_label.items())]
    if implicit_templates:
        for label in sorted(implicit_templates):
            if label not in by_label:
                log.warning("implicit template '%s' matches no label in scene %s",
                            label, manifest.scene_id)
                continue
            queries.append(QuerySpec(implicit_templates[label], "implicit",
                                     by_label[label]))
    return queries


def assign_split(index: int, total: int, shuffle_seed: int = 0) -> str:
    """90/5/5 split after a seeded shuffle of scene indices."""
    if not (0 <= index < total):
        raise SynthError(f"scene index {index} out of range [0, {total})")
    n_holdout = total // 20
    if n_holdout == 0:
        log.warning("split of %d scenes leaves empty val/test sets", total)
    perm = derive_rng(shuffle_seed, "split").permutation(total)
    rank = int(np.argsort(perm)[index])
    n_train = total - 2 * n_holdout
    if rank < n_train:
        return "train"
    if rank < n_train + n_holdout:
        return "val"
    return "test"


# ------------------------------------------------------------------ storage

@dataclass
class SceneData:
    manifest: SceneManifest
    mesh: TriMesh
    cloud: AnnotatedCloud
    path: Optional[Path] = None


def save_scene(directory, manifest: SceneManifest, mesh: TriMesh,
               cloud: AnnotatedCloud) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_json(manifest.to_dict(), directory / "manifest.json")
    dump_json([q.to_dict() for q in manifest.queries], directory / "queries.json")
    write_cloud_ply(cloud, directory / "scene.ply")
    write_mesh_ply(mesh, directory / "scene_mesh.ply")
    return directory


def load_scene(directory, library: Optional[dict] = None,
               resynthesize: bool = False) -> SceneData:
    """Load a stored scene; with `resynthesize` the geometry is replayed from
    the manifest (requires the library) instead of read from PLY."""
    directory = Path(directory)
    manifest = SceneManifest.from_dict(load_json(directory / "manifest.json"))
    if resynthesize:
        if library is None:
            raise SynthError("resynthesize requires the shape library")
        mesh, cloud = synthesize_from_manifest(manifest, library)
    else:
        mesh = read_mesh_ply(directory / "scene_mesh.ply")
        cloud = read_cloud_ply(directory / "scene.ply",
                               label_table=manifest.label_table)
    return SceneData(manifest=manifest, mesh=mesh, cloud=cloud, path=directory)
