"""Graph-based over-segmentation and supervoxel expansion of click labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from weakseg3d.pointcloud import SENTINEL_NONE, ClickAnnotation, Scene, atomic_write_text


class SupervoxelConflict(ValueError):
    """Clicks of different instances fell into one supervoxel."""

    def __init__(self, supervoxel: int, instances):
        super().__init__(f"supervoxel {supervoxel} contains clicks of instances {sorted(instances)}; "
                         "partition is too coarse")
        self.supervoxel = supervoxel
        self.instances = sorted(instances)


@dataclass(frozen=True, eq=False)
class SupervoxelPartition:
    sv_id: np.ndarray

    def __post_init__(self):
        ids = np.array(self.sv_id, dtype=np.int64, copy=True)
        ids.setflags(write=False)
        object.__setattr__(self, "sv_id", ids)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("sv_id must be a nonempty vector")
        if ids.min() != 0 or len(np.unique(ids)) != ids.max() + 1:
            raise ValueError("supervoxel ids must be dense 0..V-1")

    @property
    def num_supervoxels(self) -> int:
        return int(self.sv_id.max()) + 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.sv_id, minlength=self.num_supervoxels)

    def members(self, sv: int) -> np.ndarray:
        return np.flatnonzero(self.sv_id == sv)


@dataclass(frozen=True, eq=False)
class WeakLabels:
    instance: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        for name in ("instance", "semantic"):
            a = np.array(getattr(self, name), dtype=np.int64, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def labeled(self) -> np.ndarray:
        return self.instance != SENTINEL_NONE


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b, w):
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = w
        return a


def knn_edges(positions: np.ndarray, k: int) -> np.ndarray:
    """Undirected edges (i < j) of the symmetrised k-nearest-neighbour graph."""
    n = len(positions)
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, nbr = cKDTree(positions).query(positions, k=k + 1)
    src = np.repeat(np.arange(n), k)
    dst = nbr[:, 1:].reshape(-1)
    e = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def edge_weights(scene: Scene, edges: np.ndarray, color_scale=1.0, normal_scale=1.0) -> np.ndarray:
    i, j = edges[:, 0], edges[:, 1]
    dc = (scene.colors[i] - scene.colors[j]) * color_scale
    dn = (scene.normals[i] - scene.normals[j]) * normal_scale
    return np.sqrt((dc * dc).sum(axis=1) + (dn * dn).sum(axis=1))


def _canonical_rank(scene: Scene) -> np.ndarray:
    # order-free tie breaking: rank points lexicographically by their coordinates
    keys = np.column_stack([scene.positions, scene.colors, scene.normals])
    order = np.lexsort(keys.T[::-1])
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return rank


def build_partition(scene: Scene, k_neighbors: int = 8, merge_threshold: float = 0.1, min_size: int = 3,
                    color_scale: float = 1.0, normal_scale: float = 1.0) -> SupervoxelPartition:
    """Felzenszwalb-Huttenlocher segmentation of the k-NN graph.

    Edges are processed by increasing weight; two components merge when the
    edge weight is strictly below both of their internal differences plus
    ``merge_threshold / size``. Components smaller than ``min_size`` are then
    merged across their lightest edges.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    if merge_threshold < 0:
        raise ValueError("merge_threshold must be >= 0")
    n = len(scene)
    edges = knn_edges(scene.positions, k_neighbors)
    w = edge_weights(scene, edges, color_scale, normal_scale)
    rank = _canonical_rank(scene)
    ra, rb = rank[edges[:, 0]], rank[edges[:, 1]]
    order = np.lexsort((np.maximum(ra, rb), np.minimum(ra, rb), w))

    ds = _DisjointSet(n)
    for e in order.tolist():
        a, b = ds.find(int(edges[e, 0])), ds.find(int(edges[e, 1]))
        if a == b:
            continue
        we = float(w[e])
        if we < min(ds.internal[a] + merge_threshold / ds.size[a],
                    ds.internal[b] + merge_threshold / ds.size[b]):
            ds.union(a, b, we)
    if min_size > 1:
        for e in order.tolist():
            a, b = ds.find(int(edges[e, 0])), ds.find(int(edges[e, 1]))
            if a != b and (ds.size[a] < min_size or ds.size[b] < min_size):
                ds.union(a, b, max(ds.internal[a], ds.internal[b]))

    roots = np.array([ds.find(i) for i in range(n)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # dense ids ordered by first member
    relabel = np.empty(len(first), dtype=np.int64)
    relabel[np.argsort(first, kind="stable")] = np.arange(len(first))
    return SupervoxelPartition(relabel[inverse])


def expand_labels(partition: SupervoxelPartition, clicks: ClickAnnotation) -> WeakLabels:
    """Spread every click's labels over the supervoxel that contains it."""
    n = len(partition.sv_id)
    idx = clicks.point_index
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("click point index out of range")
    instance = np.full(n, SENTINEL_NONE, dtype=np.int64)
    semantic = np.full(n, SENTINEL_NONE, dtype=np.int64)
    owner: dict[int, tuple[int, int]] = {}
    for p, inst, sem in clicks.clicks.tolist():
        sv = int(partition.sv_id[p])
        if sv in owner:
            prev_inst, prev_sem = owner[sv]
            if prev_sem != sem or (inst != SENTINEL_NONE and prev_inst != SENTINEL_NONE and prev_inst != inst):
                raise SupervoxelConflict(sv, {prev_inst, inst})
            if inst == SENTINEL_NONE:
                continue
        owner[sv] = (inst, sem)
    for sv, (inst, sem) in owner.items():
        members = partition.sv_id == sv
        instance[members] = inst
        semantic[members] = sem
    return WeakLabels(instance, semantic)


def label_purity(weak: WeakLabels, scene: Scene) -> float:
    """Fraction of instance-labelled points whose label matches the ground truth."""
    mask = weak.labeled
    if not mask.any():
        return 1.0
    return float(np.mean(weak.instance[mask] == scene.gt_instance[mask]))


def write_partition(partition: SupervoxelPartition, path) -> None:
    rows = [f"{i} {s}" for i, s in enumerate(partition.sv_id.tolist())]
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_partition(path) -> SupervoxelPartition:
    data = np.loadtxt(path, dtype=np.int64, ndmin=2)
    order = np.argsort(data[:, 0])
    return SupervoxelPartition(data[order, 1])
