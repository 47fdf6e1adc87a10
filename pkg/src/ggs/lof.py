"""Local-Outlier-Factor mesh denoising against the dense guidance cloud.

The dense cloud lies on the true surface, so it serves as the reference
set: mesh vertices are scored against it without being inserted. Faces
touching any outlier vertex are removed, then leftover small fragments
are swept by connected-component size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import DensePointCloud, InvalidInputError, TriangleMesh
from .meshops import compact_mesh, remove_small_components

log = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_THRESHOLD = 1.5
MIN_COMPONENT_FRAC = 0.005
LRD_CAP = 1e12  # keeps scores finite for duplicated reference points


@dataclass
class LofModel:
    """k-NN statistics of the reference cloud: k-distances and local
    reachability densities, cached for scoring arbitrary queries."""

    tree: cKDTree
    k: int
    k_distances: np.ndarray  # (N,)
    lrd: np.ndarray          # (N,), all positive and finite

    def __len__(self) -> int:
        return self.tree.n


def _neighbor_table(tree: cKDTree, points: np.ndarray, k: int):
    """k nearest *other* reference points for members of the reference set."""
    dist, idx = tree.query(points, k=k + 1)
    n = len(points)
    rows = np.arange(n)
    self_col = np.argmax(idx == rows[:, None], axis=1)
    has_self = idx[rows, self_col] == rows
    # drop the row's own entry when present, else the farthest neighbor
    drop = np.where(has_self, self_col, k)
    keep = np.arange(k + 1)[None, :] != drop[:, None]
    return dist[keep].reshape(n, k), idx[keep].reshape(n, k)


def fit(cloud: DensePointCloud, k: int = DEFAULT_K) -> LofModel:
    """Cache k-distances and local reachability densities of the cloud.

    reach-dist_k(a, b) = max(k-distance(b), d(a, b)); lrd is the inverse
    mean reachability distance, capped for duplicate-point degeneracies.
    """
    if len(cloud) <= k:
        raise InvalidInputError(f"LOF needs more than k={k} reference points, "
                                f"got {len(cloud)}")
    pts = cloud.positions
    tree = cKDTree(pts)
    dist, idx = _neighbor_table(tree, pts, k)
    k_distances = dist[:, -1].copy()
    reach = np.maximum(k_distances[idx], dist)
    mean_reach = reach.mean(axis=1)
    lrd = 1.0 / np.maximum(mean_reach, 1.0 / LRD_CAP)
    return LofModel(tree=tree, k=int(k), k_distances=k_distances, lrd=lrd)


def score_many(model: LofModel, queries: np.ndarray) -> np.ndarray:
    """LOF of query points w.r.t. the reference cloud (not inserted)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    dist, idx = model.tree.query(q, k=model.k)
    if model.k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    reach = np.maximum(model.k_distances[idx], dist)
    lrd_q = 1.0 / np.maximum(reach.mean(axis=1), 1.0 / LRD_CAP)
    return model.lrd[idx].mean(axis=1) / lrd_q


def score(model: LofModel, query) -> float:
    """LOF of a single query point."""
    return float(score_many(model, np.asarray(query).reshape(1, 3))[0])


def denoise_mesh(mesh: TriangleMesh, model: LofModel,
                 threshold: float = DEFAULT_THRESHOLD,
                 min_component_frac: float = MIN_COMPONENT_FRAC) -> TriangleMesh:
    """Remove faces touching outlier vertices, then sweep small fragments.

    Deletion only: surviving vertex positions are never modified. Raises
    when nothing survives (the threshold was too aggressive).
    """
    if threshold <= 1.0:
        raise InvalidInputError("LOF threshold must be > 1")
    if mesh.n_faces == 0:
        return mesh
    scores = score_many(model, mesh.vertices)
    bad_vertex = scores > threshold
    keep_face = ~np.any(bad_vertex[mesh.faces], axis=1)
    if not keep_face.any():
        raise InvalidInputError(
            f"all faces removed at LOF threshold {threshold}; increase it")
    kept = compact_mesh(mesh.vertices, mesh.faces[keep_face])
    swept = remove_small_components(kept, min_frac=min_component_frac)
    log.info("denoise: %d -> %d faces (outliers) -> %d (fragment sweep)",
             mesh.n_faces, kept.n_faces, swept.n_faces)
    return swept
