"""Geometrically homogeneous point regions via normal-based region growing.

Seeds are taken in ascending local-curvature order; a point joins the
growing region when it lies within the distance threshold of a region point
and its normal deviates less than the angle threshold from the region's
running mean normal. Undersized regions merge into the adjacent region with
the most similar mean normal. The loop is order-fixed, so the partition is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .geometry import AnnotatedCloud, mean_point_spacing
from .util import dump_json, load_json

DEFAULT_ANGLE = np.radians(15.0)
DEFAULT_DISTANCE_SCALE = 2.5  # x mean point spacing
DEFAULT_MIN_SIZE = 20


class SuperpointError(ValueError):
    pass


@dataclass
class SuperpointPartition:
    assignment: np.ndarray          # (N,) int32 superpoint index in [0, S)
    count: int                      # S
    adjacency: np.ndarray           # (P, 2) int64 pairs a < b

    def __post_init__(self):
        self.assignment = np.ascontiguousarray(self.assignment, dtype=np.int32)
        self.adjacency = np.ascontiguousarray(
            np.asarray(self.adjacency, dtype=np.int64).reshape(-1, 2))

    def __len__(self) -> int:
        return self.count

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.count)

    @cached_property
    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(self.count + 1))
        return [order[bounds[s]:bounds[s + 1]] for s in range(self.count)]

    def centroids(self, points: np.ndarray) -> np.ndarray:
        sums = np.zeros((self.count, 3))
        np.add.at(sums, self.assignment, points)
        return sums / np.maximum(self.sizes[:, None], 1)

    def neighbor_lists(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.count)]
        for a, b in self.adjacency:
            out[int(a)].append(int(b))
            out[int(b)].append(int(a))
        return [sorted(n) for n in out]


@njit(cache=True)
def _grow_regions(order, indptr, indices, normals, cos_threshold, accept_all,
                  labels, queue):
    n = order.shape[0]
    n_regions = 0
    for k in range(n):
        seed = order[k]
        if labels[seed] != -1:
            continue
        lab = n_regions
        n_regions += 1
        labels[seed] = lab
        sx = normals[seed, 0]
        sy = normals[seed, 1]
        sz = normals[seed, 2]
        head = 0
        tail = 0
        queue[tail] = seed
        tail += 1
        while head < tail:
            p = queue[head]
            head += 1
            for e in range(indptr[p], indptr[p + 1]):
                q = indices[e]
                if labels[q] != -1:
                    continue
                if accept_all:
                    ok = True
                else:
                    norm = np.sqrt(sx * sx + sy * sy + sz * sz)
                    if norm < 1e-12:
                        mx = normals[p, 0]
                        my = normals[p, 1]
                        mz = normals[p, 2]
                    else:
                        mx = sx / norm
                        my = sy / norm
                        mz = sz / norm
                    dot = mx * normals[q, 0] + my * normals[q, 1] + mz * normals[q, 2]
                    ok = dot > cos_threshold
                if ok:
                    labels[q] = lab
                    sx += normals[q, 0]
                    sy += normals[q, 1]
                    sz += normals[q, 2]
                    queue[tail] = q
                    tail += 1
    return n_regions


def _local_curvature(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Surface-variation proxy lambda_min / sum(lambda) over k-neighborhoods."""
    n = len(points)
    k = min(k, n)
    tree = cKDTree(points)
    curv = np.empty(n)
    chunk = 65536
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        _, idx = tree.query(points[start:stop], k=k)
        if k == 1:
            curv[start:stop] = 0.0
            continue
        hood = points[idx]
        centered = hood - hood.mean(axis=1, keepdims=True)
        cov = np.einsum("mki,mkj->mij", centered, centered) / k
        evals = np.linalg.eigvalsh(cov)
        sums = evals.sum(axis=1)
        curv[start:stop] = np.where(sums > 0, evals[:, 0] / np.where(sums > 0, sums, 1.0), 0.0)
    return curv


def compute_superpoints(cloud: AnnotatedCloud,
                        angle_threshold: float = DEFAULT_ANGLE,
                        distance_threshold: float | None = None,
                        min_size: int = DEFAULT_MIN_SIZE) -> SuperpointPartition:
    """Partition the cloud into superpoints (see module docstring).

    distance_threshold defaults to 2.5x the mean point spacing. The adjacency
    radius equals the distance threshold, so region connectivity and the
    output adjacency share one notion of closeness.
    """
    if cloud.normals is None:
        raise SuperpointError(
            "cloud has no normals; run estimate_normals before computing superpoints")
    if angle_threshold <= 0:
        raise SuperpointError("angle_threshold must be positive")
    n = len(cloud)
    if n == 0:
        raise SuperpointError("empty cloud")
    if distance_threshold is None:
        distance_threshold = DEFAULT_DISTANCE_SCALE * mean_point_spacing(cloud.points)
    if distance_threshold <= 0:
        raise SuperpointError("distance_threshold must be positive")

    tree = cKDTree(cloud.points)
    pairs = tree.query_pairs(r=distance_threshold, output_type="ndarray")
    both = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else \
        np.empty((0, 2), dtype=np.int64)
    order_edges = np.lexsort((both[:, 1], both[:, 0])) if len(both) else \
        np.empty(0, dtype=np.int64)
    both = both[order_edges]
    indptr = np.zeros(n + 1, dtype=np.int64)
    if len(both):
        np.add.at(indptr, both[:, 0] + 1, 1)
    indptr = np.cumsum(indptr)
    indices = np.ascontiguousarray(both[:, 1]) if len(both) else \
        np.empty(0, dtype=np.int64)

    curvature = cloud.curvature
    if curvature is None:
        curvature = _local_curvature(cloud.points)
    order = np.argsort(curvature, kind="stable").astype(np.int64)

    labels = np.full(n, -1, dtype=np.int32)
    queue = np.empty(n, dtype=np.int64)
    accept_all = angle_threshold >= np.pi
    n_regions = _grow_regions(order, indptr, indices,
                              np.ascontiguousarray(cloud.normals),
                              float(np.cos(min(angle_threshold, np.pi))),
                              accept_all, labels, queue)

    labels, n_regions = _merge_small_regions(labels, n_regions, both,
                                             cloud.normals, min_size)

    # canonical relabeling: superpoint ids ordered by first member index
    first = np.full(n_regions, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    remap = np.empty(n_regions, dtype=np.int32)
    remap[np.argsort(first, kind="stable")] = np.arange(n_regions, dtype=np.int32)
    labels = remap[labels]

    adjacency = _region_adjacency(labels, both)
    return SuperpointPartition(assignment=labels, count=n_regions,
                               adjacency=adjacency)


def _region_adjacency(labels: np.ndarray, edges: np.ndarray) -> np.ndarray:
    if not len(edges):
        return np.empty((0, 2), dtype=np.int64)
    la = labels[edges[:, 0]].astype(np.int64)
    lb = labels[edges[:, 1]].astype(np.int64)
    keep = la != lb
    lo = np.minimum(la[keep], lb[keep])
    hi = np.maximum(la[keep], lb[keep])
    return np.unique(np.stack([lo, hi], axis=1), axis=0) if keep.any() else \
        np.empty((0, 2), dtype=np.int64)


def _merge_small_regions(labels, n_regions, edges, normals, min_size):
    """Fold regions below min_size into the adjacent region with the most
    similar mean normal; standalone small regions are kept."""
    if min_size <= 1 or n_regions == 0:
        return labels, n_regions

    parent = np.arange(n_regions)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    sizes = np.bincount(labels, minlength=n_regions).astype(np.int64)
    sums = np.zeros((n_regions, 3))
    np.add.at(sums, labels, normals)

    neighbors: list[set] = [set() for _ in range(n_regions)]
    if len(edges):
        la = labels[edges[:, 0]]
        lb = labels[edges[:, 1]]
        for a, b in zip(la.tolist(), lb.tolist()):
            if a != b:
                neighbors[a].add(b)
                neighbors[b].add(a)

    while True:
        roots = sorted({find(r) for r in range(n_regions)})
        candidates = [r for r in roots if sizes[r] < min_size and neighbors[r]]
        if not candidates:
            break
        r = min(candidates, key=lambda x: (sizes[x], x))
        mean_r = sums[r] / max(np.linalg.norm(sums[r]), 1e-12)
        best = None
        for nb in sorted(neighbors[r]):
            mean_nb = sums[nb] / max(np.linalg.norm(sums[nb]), 1e-12)
            sim = float(mean_r @ mean_nb)
            if best is None or sim > best[0] + 1e-15:
                best = (sim, nb)
        _, target = best
        parent[r] = target
        sizes[target] += sizes[r]
        sums[target] += sums[r]
        moved = neighbors[r] - {target}
        for nb in moved:
            neighbors[nb].discard(r)
            if nb != target:
                neighbors[nb].add(target)
                neighbors[target].add(nb)
        neighbors[target].discard(r)
        neighbors[r] = set()

    roots = np.array([find(r) for r in range(n_regions)])
    uniq, compact = np.unique(roots, return_inverse=True)
    return compact[labels].astype(np.int32), len(uniq)


# ------------------------------------------------------------------ purity

@dataclass
class PurityReport:
    per_part: dict[int, float]   # gt part id -> best achievable IoU
    mean: float


def superpoint_purity(partition: SuperpointPartition,
                      cloud: AnnotatedCloud) -> PurityReport:
    """Best IoU any union of superpoints can reach for each ground-truth part.

    For a fixed part, sorting superpoints by |sp intersect part| / |sp - part|
    and scanning prefixes finds the optimal union exactly (the objective is a
    ratio of a sum to a sum, so the optimal set is a prefix of that order).
    """
    part_ids = np.unique(cloud.part_id)
    pid_index = {int(p): i for i, p in enumerate(part_ids)}
    counts = np.zeros((partition.count, len(part_ids)), dtype=np.int64)
    np.add.at(counts, (partition.assignment,
                       np.vectorize(pid_index.get)(cloud.part_id)), 1)
    sp_sizes = partition.sizes

    per_part = {}
    for pid, col in pid_index.items():
        inter = counts[:, col]
        size_gt = int(inter.sum())
        nz = np.nonzero(inter)[0]
        if size_gt == 0 or len(nz) == 0:
            per_part[pid] = 0.0
            continue
        a = inter[nz].astype(np.float64)
        cost = (sp_sizes[nz] - inter[nz]).astype(np.float64)
        ratio = a / np.maximum(cost, 1e-300)
        order = np.argsort(-ratio, kind="stable")
        a_cum = np.cumsum(a[order])
        cost_cum = np.cumsum(cost[order])
        iou = a_cum / (size_gt + cost_cum)
        per_part[pid] = float(iou.max())
    mean = float(np.mean(list(per_part.values()))) if per_part else 0.0
    return PurityReport(per_part=per_part, mean=mean)


# ------------------------------------------------------------------ storage

def save_partition(partition: SuperpointPartition, path) -> None:
    """`superpoints.bin`: N and S as little-endian int64 header, then N
    int32 assignments; adjacency goes to `<stem>.adj.json`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.array([len(partition.assignment), partition.count],
                 dtype="<i8").tofile(f)
        partition.assignment.astype("<i4").tofile(f)
    dump_json([[int(a), int(b)] for a, b in partition.adjacency],
              path.with_suffix(".adj.json"))


def load_partition(path) -> SuperpointPartition:
    path = Path(path)
    with open(path, "rb") as f:
        header = np.fromfile(f, dtype="<i8", count=2)
        n, s = int(header[0]), int(header[1])
        assignment = np.fromfile(f, dtype="<i4", count=n)
    if len(assignment) != n:
        raise SuperpointError(f"{path}: truncated assignment data")
    adjacency = np.array(load_json(path.with_suffix(".adj.json")),
                         dtype=np.int64).reshape(-1, 2)
    return SuperpointPartition(assignment=assignment, count=s, adjacency=adjacency)
