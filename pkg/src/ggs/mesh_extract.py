"""Mesh extraction: TSDF fusion of rendered depth maps + marching cubes.

Depth pixels with accumulated splat opacity below a threshold contribute
nothing, so unobserved regions stay unobserved and surface openings
survive as boundary loops instead of being hallucinated shut. Marching
cubes runs only where the volume was observed (weight > 0).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from skimage import measure

from . import render
from .core import CameraModel, GaussianCloud, InvalidInputError, TriangleMesh
from .meshops import compact_mesh

log = logging.getLogger(__name__)

TRUNC_VOXELS = 4.0
WEIGHT_CAP = 64.0
DEFAULT_ALPHA_THRESHOLD = 0.5


@dataclass
class TsdfVolume:
    """Truncated signed distance volume with per-voxel observation weights."""

    origin: np.ndarray   # (3,) world position of voxel (0,0,0) center
    voxel_size: float
    dims: tuple          # (nx, ny, nz)
    tsdf: np.ndarray     # values in [-1, 1]
    weight: np.ndarray

    @classmethod
    def create(cls, origin, voxel_size, dims) -> "TsdfVolume":
        dims = tuple(int(d) for d in dims)
        return cls(np.asarray(origin, dtype=np.float64), float(voxel_size), dims,
                   np.ones(dims), np.zeros(dims))

    @property
    def truncation(self) -> float:
        return TRUNC_VOXELS * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel_size


def integrate(volume: TsdfVolume, depth: np.ndarray, cam: CameraModel) -> TsdfVolume:
    """Fuse one depth map (0 = invalid pixel) into the volume in place.

    Weighted running average per voxel; voxels farther behind the observed
    surface than the truncation distance are untouched.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise InvalidInputError("depth map does not match camera dimensions")
    centers = volume.voxel_centers()
    uv, z = cam.project(centers)
    ui = np.round(uv[:, 0]).astype(np.int64)
    vi = np.round(uv[:, 1]).astype(np.int64)
    ok = ((z > 0) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height))
    d_pix = np.zeros(len(centers))
    d_pix[ok] = depth[vi[ok], ui[ok]]
    ok &= d_pix > 0

    sdf = d_pix - z                       # positive in front of the surface
    ok &= sdf > -volume.truncation
    tsdf_obs = np.clip(sdf / volume.truncation, -1.0, 1.0)

    flat_t = volume.tsdf.reshape(-1)
    flat_w = volume.weight.reshape(-1)
    w_old = flat_w[ok]
    flat_t[ok] = np.where(w_old > 0,
                          (flat_t[ok] * w_old + tsdf_obs[ok]) / (w_old + 1.0),
                          tsdf_obs[ok])
    flat_w[ok] = np.minimum(w_old + 1.0, WEIGHT_CAP)
    return volume


def marching_cubes(volume: TsdfVolume) -> TriangleMesh:
    """Zero level set of the observed TSDF region as a triangle mesh.

    Returns an empty mesh when the observed region has no sign change.
    """
    mask = volume.weight > 0
    if not mask.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    observed = volume.tsdf[mask]
    if observed.min() >= 0.0 or observed.max() <= 0.0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        volume.tsdf, level=0.0,
        spacing=(volume.voxel_size,) * 3,
        mask=mask, allow_degenerate=False)
    verts = verts + volume.origin
    good = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2]))
    return compact_mesh(verts, faces[good].astype(np.int64))


def _mask_rough_depth(depth: np.ndarray, limit: float) -> np.ndarray:
    """Invalidate pixels whose 3x3 neighborhood spans more depth than
    ``limit`` (grazing-angle and silhouette pixels mix surfaces)."""
    from scipy.ndimage import maximum_filter, minimum_filter
    dmax = maximum_filter(np.where(depth > 0, depth, -np.inf), size=3)
    dmin = minimum_filter(np.where(depth > 0, depth, np.inf), size=3)
    rough = ~np.isfinite(dmax) | ~np.isfinite(dmin) | (dmax - dmin > limit)
    return np.where(rough, 0.0, depth)


def extract(gaussians: GaussianCloud, cameras: list[CameraModel],
            voxel_size: float | None = None,
            alpha_threshold: float = DEFAULT_ALPHA_THRESHOLD,
            bg: float = 0.0, margin_voxels: float = 6.0,
            roughness_voxels: float = 6.0) -> TriangleMesh:
    """Render depth from every camera, fuse, and run marching cubes.

    Pixels whose accumulated opacity falls below ``alpha_threshold`` are
    excluded, which is what keeps openings open; pixels whose local depth
    spread exceeds ``roughness_voxels`` voxels are excluded too (set 0 to
    disable). Default voxel size is the bounding-box diagonal / 256.
    """
    if len(gaussians) == 0:
        raise InvalidInputError("cannot extract a mesh from an empty cloud")
    lo = gaussians.positions.min(axis=0)
    hi = gaussians.positions.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if voxel_size is None:
        voxel_size = diag / 256.0 if diag > 0 else 0.01
    pad = margin_voxels * voxel_size + TRUNC_VOXELS * voxel_size
    lo = lo - pad
    hi = hi + pad
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1, 2)
    volume = TsdfVolume.create(lo, voxel_size, dims)

    for cam in cameras:
        frame = render.render(gaussians, cam, bg=(bg, bg, bg))
        depth = np.where(frame.alpha >= alpha_threshold, frame.depth, 0.0)
        if roughness_voxels:
            depth = _mask_rough_depth(depth, roughness_voxels * voxel_size)
        integrate(volume, depth, cam)

    mesh = marching_cubes(volume)
    if mesh.is_empty():
        observed = volume.weight > 0
        log.warning("extraction produced an empty mesh "
                    "(observed voxels: %d/%d, tsdf range on observed: %s)",
                    int(observed.sum()), volume.weight.size,
                    (float(volume.tsdf[observed].min()),
                     float(volume.tsdf[observed].max())) if observed.any() else "n/a")
    return mesh
