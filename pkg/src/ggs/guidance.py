"""Dense-cloud guidance: exact nearest-neighbor queries and position snapping.

A K-D tree over the guidance cloud answers exact nearest-neighbor queries;
Gaussian centers are snapped onto their nearest cloud point (hard
assignment, blend factor exposed for experimentation) and each Gaussian is
paired with the normal of that point for the alignment loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import DensePointCloud, GaussianCloud, InvalidInputError


class SpatialIndex:
    """Balanced K-D tree over the guidance cloud positions.

    Queries are exact: ties in distance are broken toward the lowest point
    index, matching a linear scan in index order.
    """

    def __init__(self, cloud: DensePointCloud, leaf_size: int = 16):
        if len(cloud) == 0:
            raise InvalidInputError("cannot index an empty point cloud")
        self.cloud = cloud
        self.leaf_size = int(leaf_size)
        self._tree = cKDTree(cloud.positions, leafsize=self.leaf_size,
                             balanced_tree=True)

    def __len__(self) -> int:
        return len(self.cloud)

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest cloud point for each query: (indices, distances).

        cKDTree breaks exact-distance ties arbitrarily, so equidistant
        candidates are re-resolved to the lowest index for determinism.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dist, idx = self._tree.query(pts, k=1)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx).astype(np.int64)
        # Re-resolve candidates inside a slightly inflated ball with the same
        # arithmetic a linear scan uses, picking (min distance, min index).
        radius = dist * (1.0 + 1e-12) + 5e-324
        for i, cand in enumerate(self._tree.query_ball_point(pts, radius)):
            if len(cand) > 1:
                cand = np.asarray(cand, dtype=np.int64)
                diff = self.cloud.positions[cand] - pts[i]
                d2 = np.sum(diff * diff, axis=1)
                idx[i] = int(cand[d2 == d2.min()].min())
        diff = pts - self.cloud.positions[idx]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        return idx, dist


@dataclass(frozen=True)
class GuidancePairing:
    """Per-Gaussian nearest guidance point: index into the cloud + distance."""

    indices: np.ndarray   # (N,) int
    distances: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.indices)


def build_index(cloud: DensePointCloud, leaf_size: int = 16) -> SpatialIndex:
    """Build the guidance K-D tree; empty clouds are rejected."""
    return SpatialIndex(cloud, leaf_size=leaf_size)


def nearest(index: SpatialIndex, p) -> tuple[int, float]:
    """Index and Euclidean distance of the cloud point closest to ``p``."""
    idx, dist = index.query(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(dist[0])


def pair_gaussians(gaussians: GaussianCloud, index: SpatialIndex) -> GuidancePairing:
    """Nearest-point assignment for every Gaussian center."""
    idx, dist = index.query(gaussians.positions)
    return GuidancePairing(idx, dist)


def snap_gaussians(gaussians: GaussianCloud, index: SpatialIndex,
                   blend: float = 1.0) -> tuple[GaussianCloud, GuidancePairing]:
    """Move every Gaussian center onto its nearest guidance point.

    With the default blend of 1.0 positions are assigned exactly (bitwise)
    to cloud members; smaller factors interpolate toward them. All other
    Gaussian fields are left untouched.
    """
    pairing = pair_gaussians(gaussians, index)
    targets = index.cloud.positions[pairing.indices]
    if blend >= 1.0:
        new_pos = targets.copy()
    else:
        new_pos = (1.0 - blend) * gaussians.positions + blend * targets
    return gaussians.replace(positions=new_pos), pairing


def paired_normals(pairing: GuidancePairing, cloud: DensePointCloud) -> np.ndarray:
    """(N,3) guidance normals, one per Gaussian, in Gaussian order."""
    if len(pairing) and pairing.indices.max() >= len(cloud):
        raise InvalidInputError("pairing indices exceed cloud size")
    return cloud.normals[pairing.indices]
