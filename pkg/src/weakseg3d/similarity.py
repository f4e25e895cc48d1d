"""Pairwise point similarities used for clustering, pseudo labels and fusion.

Three forms:

* ``weak``: exp(-|e_i - e_j|^2), embeddings only.
* ``full``: exp(-(|e_i - e_j| / sigma_e)^2 - (|q_i - q_j| / sigma_p)^2) where q
  is the position, offset-shifted when ``use_offsets`` is set.
* ``composite``: the ``full`` kernel multiplied by the cosine similarity of the
  two semantic probability vectors. Spatial and semantic factors can be
  switched off for ablations.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from weakseg3d.model import ModelOutput
from weakseg3d.pointcloud import Scene

MODES = ("weak", "composite", "full")


@dataclass(frozen=True)
class SimilarityConfig:
    mode: str = "composite"
    sigma_e: float = 1.0
    sigma_p: float = 1.0
    use_offsets: bool = False
    use_spatial: bool = True
    use_semantic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown similarity mode {self.mode!r}")
        if not (self.sigma_e > 0 and self.sigma_p > 0):
            raise ValueError("sigma_e and sigma_p must be positive")

    @property
    def spatial(self) -> bool:
        return self.mode == "full" or (self.mode == "composite" and self.use_spatial)

    @property
    def semantic(self) -> bool:
        return self.mode == "composite" and self.use_semantic

    @property
    def embed_scale(self) -> float:
        return 1.0 if self.mode == "weak" else self.sigma_e

    def replace(self, **kw) -> "SimilarityConfig":
        return dataclasses.replace(self, **kw)

    def label(self) -> str:
        if self.mode != "composite":
            return self.mode
        parts = ["emb"] + (["spa"] if self.use_spatial else []) + (["sem"] if self.use_semantic else [])
        return "+".join(parts)


@dataclass(frozen=True)
class Features:
    """Per-point inputs of the similarity: embedding, spatial coordinate, semantic probabilities."""

    embeddings: np.ndarray
    spatial: np.ndarray
    probs: np.ndarray

    def __len__(self):
        return len(self.embeddings)

    def take(self, idx) -> "Features":
        return Features(self.embeddings[idx], self.spatial[idx], self.probs[idx])


def point_features(output: ModelOutput, scene: Scene, cfg: SimilarityConfig) -> Features:
    q = scene.positions + output.offsets if cfg.use_offsets else scene.positions
    return Features(output.embeddings, np.asarray(q), output.semantic_probs)


def semantic_sim(s_i, s_j) -> float:
    s_i = np.asarray(s_i, dtype=float)
    s_j = np.asarray(s_j, dtype=float)
    ni, nj = float(np.dot(s_i, s_i)), float(np.dot(s_j, s_j))
    if ni == 0.0 or nj == 0.0:
        raise ValueError("semantic similarity of a zero vector is undefined")
    return min(1.0, max(0.0, float(np.dot(s_i, s_j)) / math.sqrt(ni * nj)))


def _sqdist(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.dot(d, d))


def similarity(i: int, j: int, output: ModelOutput, scene: Scene, cfg: SimilarityConfig) -> float:
    """Similarity of points i and j of one scene. Exactly symmetric; 1 when i == j."""
    f = point_features(output, scene, cfg)
    return pair_similarity(f, i, f, j, cfg)


def pair_similarity(fa: Features, i: int, fb: Features, j: int, cfg: SimilarityConfig) -> float:
    expo = _sqdist(fa.embeddings[i], fb.embeddings[j]) / cfg.embed_scale ** 2
    if cfg.spatial:
        expo += _sqdist(fa.spatial[i], fb.spatial[j]) / cfg.sigma_p ** 2
    s = math.exp(-expo)
    if cfg.semantic:
        s *= semantic_sim(fa.probs[i], fb.probs[j])
    return s


def sqdist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.einsum("ij,ij->i", a, a)
    nb = np.einsum("ij,ij->i", b, b)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("semantic similarity of a zero vector is undefined")
    # elementwise einsum keeps each entry independent of the matrix shape
    return np.clip(np.einsum("ik,jk->ij", a, b) / np.sqrt(na[:, None] * nb[None, :]), 0.0, 1.0)


def similarity_matrix(fa: Features, fb: Features, cfg: SimilarityConfig) -> np.ndarray:
    """All similarities between the points of ``fa`` (rows) and ``fb`` (columns)."""
    expo = sqdist_matrix(fa.embeddings, fb.embeddings) / cfg.embed_scale ** 2
    if cfg.spatial:
        expo = expo + sqdist_matrix(fa.spatial, fb.spatial) / cfg.sigma_p ** 2
    s = np.exp(-expo)
    if cfg.semantic:
        s = s * cosine_matrix(fa.probs, fb.probs)
    return s


def scene_similarity(output: ModelOutput, scene: Scene, cfg: SimilarityConfig) -> np.ndarray:
    f = point_features(output, scene, cfg)
    return similarity_matrix(f, f, cfg)
