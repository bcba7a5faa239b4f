"""Lifting 2D part masks to 3D part instances by weighted superpoint voting.

Each superpoint's score is the weighted ratio of its visible points that
land inside a part mask, summed over views; weights favor views whose camera
shares (or neighbors) the superpoint's grid cell. Foreground superpoints
(score strictly above the threshold) form instances as connected components
of the superpoint adjacency graph.

All sums are integer counts times integer weights, so scores are exact
rationals evaluated in one division: results are bit-reproducible and agree
with a per-point brute-force evaluation regardless of summation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .geometry import AnnotatedCloud, TriMesh, estimate_normals
from .render import (Camera, GridDecomposition, ViewBundle, compute_visibility,
                     default_visibility_epsilon, pixel_of, plan_global_snap,
                     plan_room_tour, project_points, render_view)
from .segmenter import Mask2D, SegmenterBackend, masks_by_view, segment_views
from .superpoints import SuperpointPartition, compute_superpoints
from .synth import QuerySpec, SceneData

log = logging.getLogger(__name__)

FOREGROUND_THRESHOLD = 0.5


@dataclass
class ViewWeight:
    value: int            # 1, 2 or 3
    view_index: int
    superpoint_index: int


@dataclass
class SuperpointScore:
    superpoint_index: int
    score: float
    numerator: int
    denominator: int


@dataclass
class PartInstance3D:
    mask: np.ndarray              # (N,) bool over scene points
    superpoints: list[int]
    confidence: float


def _cell_weight(cam_cell: tuple[int, int], sp_cell: tuple[int, int]) -> int:
    di = abs(cam_cell[0] - sp_cell[0])
    dj = abs(cam_cell[1] - sp_cell[1])
    if di == 0 and dj == 0:
        return 3
    if di <= 1 and dj <= 1:
        return 2
    return 1


def assign_view_weight(camera: Camera, superpoint_centroid: np.ndarray,
                       grid: GridDecomposition, view_index: int = 0,
                       superpoint_index: int = 0) -> ViewWeight:
    """Proximity weight between one view and one superpoint: 3 for the same
    grid cell, 2 for an 8-neighbor cell, 1 otherwise. Centroids outside the
    grid are clamped."""
    sp_cell = grid.cell_of_point(np.asarray(superpoint_centroid)[:2])
    return ViewWeight(value=_cell_weight(camera.grid_cell, sp_cell),
                      view_index=view_index, superpoint_index=superpoint_index)


def weight_matrix(cameras: list[Camera], partition: SuperpointPartition,
                  cloud: AnnotatedCloud, grid: GridDecomposition,
                  mode: str = "proximity") -> np.ndarray:
    """(V, S) integer weights; `uniform` mode is the ablation switch."""
    v, s = len(cameras), partition.count
    if mode == "uniform":
        return np.ones((v, s), dtype=np.int64)
    if mode != "proximity":
        raise ValueError(f"unknown weight mode '{mode}'")
    centroids = partition.centroids(cloud.points)
    ci, cj = grid.cell_of_points(centroids[:, :2])
    weights = np.empty((v, s), dtype=np.int64)
    for k, cam in enumerate(cameras):
        di = np.abs(ci - cam.grid_cell[0])
        dj = np.abs(cj - cam.grid_cell[1])
        w = np.ones(s, dtype=np.int64)
        w[(di <= 1) & (dj <= 1)] = 2
        w[(di == 0) & (dj == 0)] = 3
        weights[k] = w
    return weights


def score_superpoints(partition: SuperpointPartition,
                      views: list[ViewBundle],
                      masks: list[Mask2D],
                      visibility: list[np.ndarray],
                      weights: np.ndarray,
                      cloud: AnnotatedCloud) -> list[SuperpointScore]:
    """Per-superpoint weighted coverage ratio.

    score_i = sum_v W[v,i] * |visible points of i inside view v's masks|
            / sum_v W[v,i] * |visible points of i in view v|
    with 0 when the denominator is 0 (no visual evidence means background).
    """
    s = partition.count
    num = np.zeros(s, dtype=np.int64)
    den = np.zeros(s, dtype=np.int64)
    union = masks_by_view(masks, len(views))
    assign = partition.assignment
    for v, view in enumerate(views):
        vis = visibility[v]
        vis_count = np.bincount(assign[vis], minlength=s).astype(np.int64)
        if union[v] is not None:
            uv, _, in_front = project_points(view.camera, cloud.points)
            px = pixel_of(uv)
            w, h = view.camera.resolution
            inside = in_front & (px[:, 0] >= 0) & (px[:, 0] < w) \
                & (px[:, 1] >= 0) & (px[:, 1] < h)
            ins = np.zeros(len(cloud), dtype=bool)
            sel = np.nonzero(inside)[0]
            ins[sel] = union[v][px[sel, 1], px[sel, 0]]
            ins_count = np.bincount(assign[vis & ins], minlength=s).astype(np.int64)
        else:
            ins_count = np.zeros(s, dtype=np.int64)
        num += weights[v] * ins_count
        den += weights[v] * vis_count
    scores = []
    for i in range(s):
        score = float(num[i]) / float(den[i]) if den[i] > 0 else 0.0
        scores.append(SuperpointScore(superpoint_index=i, score=score,
                                      numerator=int(num[i]),
                                      denominator=int(den[i])))
    return scores


def form_instances(scores: list[SuperpointScore],
                   partition: SuperpointPartition,
                   threshold: float = FOREGROUND_THRESHOLD) -> list[PartInstance3D]:
    """Connected components of foreground superpoints (score strictly above
    the threshold) over the superpoint adjacency graph, most confident
    first. Instance confidence is the point-count-weighted mean score."""
    score_by_index = np.array([s.score for s in scores])
    foreground = np.nonzero(score_by_index > threshold)[0]
    fg_set = set(foreground.tolist())
    neighbor = partition.neighbor_lists()
    sizes = partition.sizes

    seen: set[int] = set()
    instances: list[PartInstance3D] = []
    for start in foreground.tolist():
        if start in seen:
            continue
        component = []
        stack = [start]
        seen.add(start)
        while stack:
            cur = stack.pop()
            component.append(cur)
            for nb in neighbor[cur]:
                if nb in fg_set and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        component.sort()
        mask = np.isin(partition.assignment, component)
        weight = sizes[component].astype(np.float64)
        confidence = float((score_by_index[component] * weight).sum() / weight.sum())
        instances.append(PartInstance3D(mask=mask, superpoints=component,
                                        confidence=confidence))
    instances.sort(key=lambda inst: (-inst.confidence, -int(inst.mask.sum()),
                                     inst.superpoints[0]))
    return instances


# ----------------------------------------------------------------- pipeline

@dataclass
class PipelineSettings:
    """Knobs for the end-to-end run; mirrors the CLI config."""
    camera_strategy: str = "room_tour"     # room_tour | global_snap
    global_snap_views: int = 16
    resolution: tuple[int, int] = (1024, 1024)
    vertical_fov: float = np.radians(60.0)
    near: float = 0.05
    weight_mode: str = "proximity"         # proximity | uniform
    visibility_epsilon: Optional[float] = None
    superpoint_angle: float = np.radians(15.0)
    superpoint_distance: Optional[float] = None
    superpoint_min_size: int = 20
    normals_k: int = 16
    min_pixels: int = 10
    instance_threshold: float = FOREGROUND_THRESHOLD


class ScenePipeline:
    """Per-scene artifact cache: cameras, views, superpoints, visibility.

    Everything here is query-independent; per-query work is only 2D
    segmentation, scoring and instance formation, so sweeping all queries of
    a scene reuses one render pass.
    """

    def __init__(self, scene: SceneData, settings: PipelineSettings,
                 backend: SegmenterBackend):
        self.scene = scene
        self.settings = settings
        self.backend = backend
        self.bounds = scene.manifest.scene_bounds or scene.cloud.aabb()
        self.grid = GridDecomposition(self.bounds)
        self._cameras: Optional[list[Camera]] = None
        self._views: Optional[list[ViewBundle]] = None
        self._visibility: Optional[list[np.ndarray]] = None
        self._partition: Optional[SuperpointPartition] = None
        self._weights: Optional[np.ndarray] = None
        self._cloud_with_normals: Optional[AnnotatedCloud] = None

    @property
    def cameras(self) -> list[Camera]:
        if self._cameras is None:
            s = self.settings
            if s.camera_strategy == "room_tour":
                self._cameras = plan_room_tour(
                    self.bounds, self.scene.cloud, resolution=s.resolution,
                    vertical_fov=s.vertical_fov, near=s.near)
            elif s.camera_strategy == "global_snap":
                self._cameras = plan_global_snap(
                    self.bounds, s.global_snap_views, resolution=s.resolution,
                    vertical_fov=s.vertical_fov, near=s.near)
            else:
                raise ValueError(f"unknown camera strategy '{s.camera_strategy}'")
        return self._cameras

    @property
    def views(self) -> list[ViewBundle]:
        if self._views is None:
            palette = self.scene.manifest.palette
            self._views = [render_view(self.scene.mesh, palette, cam)
                           for cam in self.cameras]
        return self._views

    @views.setter
    def views(self, bundles: list[ViewBundle]):
        self._views = bundles
        self._cameras = [b.camera for b in bundles]

    @property
    def epsilon(self) -> float:
        if self.settings.visibility_epsilon is not None:
            return self.settings.visibility_epsilon
        return default_visibility_epsilon(self.bounds.diagonal,
                                          self.settings.resolution,
                                          self.settings.vertical_fov)

    @property
    def visibility(self) -> list[np.ndarray]:
        if self._visibility is None:
            eps = self.epsilon
            self._visibility = [compute_visibility(self.scene.cloud, v, eps)
                                for v in self.views]
        return self._visibility

    @property
    def cloud_with_normals(self) -> AnnotatedCloud:
        if self._cloud_with_normals is None:
            self._cloud_with_normals = estimate_normals(self.scene.cloud,
                                                        k=self.settings.normals_k)
        return self._cloud_with_normals

    @property
    def partition(self) -> SuperpointPartition:
        if self._partition is None:
            s = self.settings
            self._partition = compute_superpoints(
                self.cloud_with_normals, angle_threshold=s.superpoint_angle,
                distance_threshold=s.superpoint_distance,
                min_size=s.superpoint_min_size)
        return self._partition

    @partition.setter
    def partition(self, p: SuperpointPartition):
        self._partition = p
        self._weights = None

    @property
    def weights(self) -> np.ndarray:
        if self._weights is None:
            self._weights = weight_matrix(self.cameras, self.partition,
                                          self.scene.cloud, self.grid,
                                          self.settings.weight_mode)
        return self._weights

    def adopt_caches(self, other: "ScenePipeline",
                     views: bool = True, partition: bool = True,
                     visibility: bool = True) -> None:
        """Share immutable artifacts with another pipeline over the same
        scene (e.g. to compare weight modes without re-rendering)."""
        if other.scene is not self.scene:
            raise ValueError("can only adopt caches for the same scene")
        if views and other._views is not None:
            self._views = other._views
            self._cameras = other._cameras
            if visibility and other._visibility is not None:
                self._visibility = other._visibility
        if partition and other._partition is not None:
            self._partition = other._partition
            self._cloud_with_normals = other._cloud_with_normals

    def segment(self, query: Union[QuerySpec, str],
                masks: Optional[list[Mask2D]] = None) -> list[PartInstance3D]:
        """Run the per-query half of the pipeline (masks may be injected,
        e.g. pre-parsed external responses or corrupted-ablation masks)."""
        if masks is None:
            masks = segment_views(self.views, query, self.scene.manifest,
                                  self.backend)
        scores = score_superpoints(self.partition, self.views, masks,
                                   self.visibility, self.weights,
                                   self.scene.cloud)
        return form_instances(scores, self.partition,
                              self.settings.instance_threshold)


def segment_scene(scene: SceneData, query: Union[QuerySpec, str],
                  settings: Optional[PipelineSettings] = None,
                  backend: Optional[SegmenterBackend] = None) -> list[PartInstance3D]:
    """End-to-end: plan cameras, render, segment 2D, group to 3D parts."""
    settings = settings or PipelineSettings()
    backend = backend or SegmenterBackend()
    return ScenePipeline(scene, settings, backend).segment(query)


# ------------------------------------------------------------------ export

def instances_to_dict(query_text: str, instances: list[PartInstance3D]) -> dict:
    return {
        "query": query_text,
        "instances": [
            {
                "confidence": inst.confidence,
                "superpoints": [int(s) for s in inst.superpoints],
                "points_rle": _rle_encode(inst.mask),
            }
            for inst in instances
        ],
    }


def instances_from_dict(d: dict, n_points: int) -> list[PartInstance3D]:
    out = []
    for e in d["instances"]:
        out.append(PartInstance3D(mask=_rle_decode(e["points_rle"], n_points),
                                  superpoints=list(e["superpoints"]),
                                  confidence=float(e["confidence"])))
    return out


def _rle_encode(mask: np.ndarray) -> list[int]:
    """Flat [start, length, start, length, ...] runs of set point indices."""
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        return []
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    out = []
    for s, e in zip(starts, ends):
        out.extend((int(s), int(e - s + 1)))
    return out


def _rle_decode(rle: list[int], n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for k in range(0, len(rle), 2):
        mask[rle[k]:rle[k] + rle[k + 1]] = True
    return mask
