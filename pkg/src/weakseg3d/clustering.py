"""Grouping procedures: mean-shift, k-means seeded at the clicks, and
nearest-click assignment for several clicks per instance.

Every procedure is deterministic. Argmax ties go to the lowest instance id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from weakseg3d.model import ModelOutput
from weakseg3d.pointcloud import SENTINEL_NONE, ClickAnnotation, Scene, atomic_write_text
from weakseg3d.similarity import (Features, SimilarityConfig, cosine_matrix, point_features,
                                  similarity_matrix)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    cluster_id: np.ndarray
    num_clusters: int
    seeds: np.ndarray | None = None
    cluster_instance: np.ndarray | None = None
    iterations: int = 0
    converged: bool = True
    stop_reason: str = ""

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_id == c)

    def instance_labels(self) -> np.ndarray:
        """Per-point click instance id (seeded procedures only)."""
        if self.cluster_instance is None:
            raise ValueError("assignment is not tied to clicked instances")
        out = np.full(len(self.cluster_id), SENTINEL_NONE, dtype=np.int64)
        ok = self.cluster_id != SENTINEL_NONE
        out[ok] = self.cluster_instance[self.cluster_id[ok]]
        return out


def _subset(points, n):
    if points is None:
        return np.arange(n)
    points = np.asarray(points, dtype=np.int64)
    if len(np.unique(points)) != len(points):
        raise ValueError("duplicate point indices")
    return np.sort(points)


def mean_shift_features(output: ModelOutput, scene: Scene, cfg: SimilarityConfig) -> np.ndarray:
    """Coordinates in which the similarity kernel is exp(-|x_i - x_j|^2)."""
    f = point_features(output, scene, cfg)
    parts = [f.embeddings / cfg.embed_scale]
    if cfg.spatial:
        parts.append(f.spatial / cfg.sigma_p)
    return np.hstack(parts)


def mean_shift(output: ModelOutput, scene: Scene, cfg: SimilarityConfig, convergence_tol: float = 1e-4,
               max_iters: int = 100, mode_merge_tol: float = 0.05, points=None) -> ClusterAssignment:
    """Gaussian mean-shift in the similarity feature space.

    Each point's copy of its feature vector moves to the similarity-weighted
    mean of all (stationary) point features; the semantic factor, when on,
    multiplies the weights with the fixed cosine of the probability vectors.
    Points whose final positions are within ``mode_merge_tol`` (transitively)
    form one cluster. Points outside ``points`` get SENTINEL_NONE.
    """
    if convergence_tol <= 0 or mode_merge_tol <= 0:
        raise ValueError("tolerances must be positive")
    n = len(scene)
    idx = _subset(points, n)
    cluster_id = np.full(n, SENTINEL_NONE, dtype=np.int64)
    if len(idx) == 0:
        return ClusterAssignment(cluster_id, 0)
    x = mean_shift_features(output, scene, cfg)[idx]
    q = cosine_matrix(output.semantic_probs[idx], output.semantic_probs[idx]) if cfg.semantic else None
    y = x.copy()
    xx = np.einsum("ij,ij->i", x, x)
    converged = False
    it = 0
    while it < max_iters:
        yy = np.einsum("ij,ij->i", y, y)
        d2 = np.maximum(yy[:, None] + xx[None, :] - 2.0 * (y @ x.T), 0.0)
        w = np.exp(-d2)
        if q is not None:
            w *= q
        y_new = (w @ x) / w.sum(axis=1, keepdims=True)
        shift = np.sqrt(np.max(np.einsum("ij,ij->i", y_new - y, y_new - y)))
        y = y_new
        it += 1
        if shift < convergence_tol:
            converged = True
            break

    pairs = cKDTree(y).query_pairs(mode_merge_tol, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(idx), len(idx)))
    k, comp = connected_components(graph, directed=False)
    # ids in order of each cluster's lowest point index
    _, first = np.unique(comp, return_index=True)
    relabel = np.empty(k, dtype=np.int64)
    relabel[np.argsort(first, kind="stable")] = np.arange(k)
    cluster_id[idx] = relabel[comp]
    return ClusterAssignment(cluster_id, int(k), iterations=it, converged=converged,
                             stop_reason="converged" if converged else "max_iters")


def _instance_clicks(clicks: ClickAnnotation):
    """Instance clicks ordered by (instance id, point index)."""
    c = clicks.instance_clicks().clicks
    order = np.lexsort((c[:, 0], c[:, 1]))
    return c[order]


def _seed_table(clicks: ClickAnnotation, n: int):
    c = _instance_clicks(clicks)
    if len(c) == 0:
        raise ValueError("no instance clicks")
    if len(np.unique(c[:, 0])) != len(c):
        raise ValueError("duplicate click indices")
    if c[:, 0].min() < 0 or c[:, 0].max() >= n:
        raise ValueError("click point index out of range")
    return c


def _pinned_argmax(sim: np.ndarray, rows: np.ndarray, seed_rows: np.ndarray, seed_cluster: np.ndarray):
    assign = np.argmax(sim, axis=1)
    assign[seed_rows] = seed_cluster
    return assign


def nearest_seed_assignment(output: ModelOutput, scene: Scene, cfg: SimilarityConfig, clicks: ClickAnnotation,
                            points=None) -> ClusterAssignment:
    """Each point joins the click of highest similarity; clicked points keep their own."""
    return kmeans_fixed_seeds(output, scene, cfg, clicks, max_iters=0, points=points)


def kmeans_fixed_seeds(output: ModelOutput, scene: Scene, cfg: SimilarityConfig, clicks: ClickAnnotation,
                       max_iters: int = 20, points=None, centroid_mode: str = "tuple") -> ClusterAssignment:
    """k-means whose seeds are the clicked points, one cluster per clicked instance.

    Centroids carry the whole similarity tuple (embedding, spatial coordinate,
    renormalised semantic probabilities); with ``centroid_mode='embedding'``
    only the embedding moves. Iteration stops at an assignment fixed point,
    after ``max_iters`` updates, or as soon as a clicked point would leave its
    own cluster, in which case the last valid assignment is returned.
    """
    if centroid_mode not in ("tuple", "embedding"):
        raise ValueError(f"unknown centroid_mode {centroid_mode!r}")
    n = len(scene)
    table = _seed_table(clicks, n)
    if len(np.unique(table[:, 1])) != len(table):
        raise ValueError("k-means needs exactly one click per instance; use nn_assign_multiclick")
    seeds = table[:, 0]
    k = len(seeds)
    idx = np.union1d(_subset(points, n), seeds)
    row_of = {p: r for r, p in enumerate(idx.tolist())}
    seed_rows = np.array([row_of[p] for p in seeds.tolist()])
    own = np.arange(k)

    f = point_features(output, scene, cfg)
    fp = f.take(idx)
    centroids = f.take(seeds)
    assign = _pinned_argmax(similarity_matrix(fp, centroids, cfg), idx, seed_rows, own)

    it = 0
    reason = "max_iters" if max_iters == 0 else ""
    converged = max_iters == 0
    while it < max_iters:
        centroids = _update_centroids(fp, assign, k, centroids, centroid_mode)
        new = np.argmax(similarity_matrix(fp, centroids, cfg), axis=1)
        if np.any(new[seed_rows] != own):
            reason = "seed_conflict"
            converged = False
            break
        it += 1
        if np.array_equal(new, assign):
            reason, converged = "fixed_point", True
            break
        assign = new
    else:
        if max_iters > 0:
            reason = "max_iters"

    cluster_id = np.full(n, SENTINEL_NONE, dtype=np.int64)
    cluster_id[idx] = assign
    return ClusterAssignment(cluster_id, k, seeds=seeds.copy(), cluster_instance=table[:, 1].copy(),
                             iterations=it, converged=converged, stop_reason=reason)


def _update_centroids(fp: Features, assign, k, prev: Features, mode) -> Features:
    counts = np.bincount(assign, minlength=k).astype(float)[:, None]
    e = np.zeros((k, fp.embeddings.shape[1]))
    np.add.at(e, assign, fp.embeddings)
    e /= counts
    if mode == "embedding":
        return Features(e, prev.spatial, prev.probs)
    q = np.zeros((k, 3))
    np.add.at(q, assign, fp.spatial)
    s = np.zeros((k, fp.probs.shape[1]))
    np.add.at(s, assign, fp.probs)
    s /= s.sum(axis=1, keepdims=True)
    return Features(e, q / counts, s)


def nn_assign_multiclick(output: ModelOutput, scene: Scene, cfg: SimilarityConfig, clicks: ClickAnnotation,
                         points=None) -> ClusterAssignment:
    """Assign each point to the instance with the highest mean similarity to its clicks."""
    n = len(scene)
    table = _seed_table(clicks, n)
    instances = np.unique(table[:, 1])
    idx = np.union1d(_subset(points, n), table[:, 0])
    f = point_features(output, scene, cfg)
    sim = similarity_matrix(f.take(idx), f.take(table[:, 0]), cfg)
    likelihood = np.stack([sim[:, table[:, 1] == inst].mean(axis=1) for inst in instances], axis=1)
    row_of = {p: r for r, p in enumerate(idx.tolist())}
    click_rows = np.array([row_of[p] for p in table[:, 0].tolist()])
    click_cluster = np.searchsorted(instances, table[:, 1])
    assign = _pinned_argmax(likelihood, idx, click_rows, click_cluster)
    cluster_id = np.full(n, SENTINEL_NONE, dtype=np.int64)
    cluster_id[idx] = assign
    seeds = np.array([table[table[:, 1] == inst][0, 0] for inst in instances])
    return ClusterAssignment(cluster_id, len(instances), seeds=seeds, cluster_instance=instances,
                             iterations=0, converged=True, stop_reason="direct")


def write_assignment(assignment: ClusterAssignment, path) -> None:
    rows = [f"{i} {c}" for i, c in enumerate(assignment.cluster_id.tolist())]
    atomic_write_text(path, "\n".join(rows) + "\n")
