"""Shared test utilities: independent oracles, finite differences, fixtures.

Oracles here are deliberately written from scratch (linear scans, O(n^2)
loops) so they exercise none of the package's fast paths.
"""

from __future__ import annotations

import numpy as np

import ggs.synth as synth
from ggs.core import CameraModel, DensePointCloud, GaussianCloud


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def brute_force_nearest(points: np.ndarray, query: np.ndarray):
    """Linear-scan nearest neighbor: (index, distance); first min wins."""
    diff = points - query
    d2 = np.sum(diff * diff, axis=1)
    idx = int(np.argmin(d2))
    return idx, float(np.sqrt(d2[idx]))


def brute_force_lof(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """O(n^2) textbook LOF of external queries against a reference set."""
    n = len(points)
    d_ref = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d_ref, np.inf)
    nbr = np.argsort(d_ref, axis=1, kind="stable")[:, :k]
    kdist = d_ref[np.arange(n)[:, None], nbr][:, -1]

    def lrd_of(dist_row, nbr_row):
        reach = np.maximum(kdist[nbr_row], dist_row)
        return 1.0 / max(reach.mean(), 1e-12)

    lrd = np.array([lrd_of(d_ref[i, nbr[i]], nbr[i]) for i in range(n)])

    out = []
    for q in np.atleast_2d(queries):
        dq = np.sqrt(((points - q) ** 2).sum(-1))
        qn = np.argsort(dq, kind="stable")[:k]
        lrd_q = lrd_of(dq[qn], qn)
        out.append(lrd[qn].mean() / lrd_q)
    return np.array(out)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def central_fd(fn, arr: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of scalar fn wrt every entry of arr.

    ``arr`` is mutated in place around each evaluation and restored.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = fn()
        arr[idx] = orig - h
        fm = fn()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def rel_errors(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return np.abs(analytic - fd) / denom


# ---------------------------------------------------------------------------
# Random parameter clouds
# ---------------------------------------------------------------------------

def random_gaussian_cloud(rng: np.random.Generator, n: int,
                          depth_range=(2.0, 4.0), lateral: float = 0.4,
                          scale_range=(0.05, 0.25), tie_margin: float = 1e-4,
                          opacity_range=(-1.0, 1.5)) -> GaussianCloud:
    """Random primitives in front of a canonical camera, no near-ties in scale."""
    pos = np.column_stack([rng.uniform(-lateral, lateral, n),
                           rng.uniform(-lateral, lateral, n),
                           rng.uniform(*depth_range, n)])
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    while True:
        ls = np.log(rng.uniform(*scale_range, (n, 3)))
        srt = np.sort(ls, axis=1)
        if np.all(srt[:, 1] - srt[:, 0] > tie_margin):
            break
    op = rng.uniform(*opacity_range, n)
    col = rng.uniform(0.1, 0.9, (n, 3))
    return GaussianCloud(pos, rot, ls, op, col)


def canonical_camera(size: int = 16, focal: float = 40.0) -> CameraModel:
    return CameraModel(focal, focal, (size - 1) / 2.0, (size - 1) / 2.0,
                       np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), size, size)


# ---------------------------------------------------------------------------
# Multi-view fixture scenes (tuned so plane-sweep can localize depth)
# ---------------------------------------------------------------------------

def mvs_plane_scene(n_views: int = 10, width: int = 160, height: int = 120):
    """Textured plane at z=0, cameras on a small ring at z=-2.5."""
    import ggs.mvs as mvs
    shape = synth.Plane(z0=0.0, half_extent=1.8)
    cams = {}
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views
        pos = np.array([0.6 * np.cos(ang), 0.6 * np.sin(ang), -2.5])
        cams[i] = synth.look_at_camera(pos, (0, 0, 0), width, height, 200.0)
    images, depths, cloud = synth.make_scene(shape, cams, texture_seed=3,
                                             n_cloud=5000)
    views = [mvs.View(i, cams[i], images[i]) for i in sorted(cams)]
    config = mvs.MvsConfig(downsample=2, num_planes=64,
                           depth_min=1.8, depth_max=3.4)
    return shape, views, config


def mvs_sphere_scene(n_views: int = 12, width: int = 160, height: int = 120):
    """Textured sphere (radius 1.5) with a camera ring at distance 4."""
    import ggs.mvs as mvs
    shape = synth.Sphere(radius=1.5)
    cams = synth.ring_cameras(n_views, 4.0, 0.3, width, height, 280.0)
    images, depths, cloud = synth.make_scene(shape, cams, texture_seed=5,
                                             n_cloud=5000)
    views = [mvs.View(i, cams[i], images[i]) for i in sorted(cams)]
    config = mvs.MvsConfig(downsample=2, num_planes=24,
                           depth_min=2.0, depth_max=3.5)
    return shape, views, config


def true_depth_map(shape, cam: CameraModel) -> np.ndarray:
    """Analytic z-depth of a shape for every pixel (0 where no hit)."""
    H, W = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    rays = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy,
                     np.ones_like(us)], axis=-1).reshape(-1, 3)
    dirs = rays @ cam.rotation_matrix
    origins = np.tile(cam.center, (H * W, 1))
    ok, s, _, _ = shape.intersect(origins, dirs)
    return np.where(ok, s, 0.0).reshape(H, W)


def sphere_camera_rig(n_ring: int = 8, radius: float = 3.0, size: int = 96,
                      focal: float = 95.0) -> list[CameraModel]:
    """Three elevation rings plus top/bottom views: full sphere coverage."""
    cams = []
    for elev in (0.0, 45.0, -45.0):
        ring = synth.ring_cameras(n_ring, radius * np.cos(np.radians(elev)),
                                  radius * np.sin(np.radians(elev)),
                                  size, size, focal)
        cams.extend(ring[i] for i in sorted(ring))
    cams.append(synth.look_at_camera((0.05, 0.0, radius), (0, 0, 0), size, size, focal))
    cams.append(synth.look_at_camera((0.05, 0.0, -radius), (0, 0, 0), size, size, focal))
    return cams


def tube_camera_rig(n_ring: int = 10, radius: float = 3.0, size: int = 96,
                    focal: float = 95.0) -> list[CameraModel]:
    cams = []
    for h in (0.0, 0.7, -0.7):
        ring = synth.ring_cameras(n_ring, radius, h, size, size, focal)
        cams.extend(ring[i] for i in sorted(ring))
    return cams


def trainer_sphere_scene(n_views: int = 20, size: int = 64, n_cloud: int = 6000,
                         focal: float = 60.0):
    """Ray-cast sphere views plus an exact guidance cloud for training."""
    shape = synth.Sphere(radius=1.0)
    cams = synth.ring_cameras(n_views, 3.0, 0.4, size, size, focal,
                              elevation_wobble=0.5)
    images, _, cloud = synth.make_scene(shape, cams, texture_seed=7,
                                        n_cloud=n_cloud)
    views = [(cams[i], images[i]) for i in sorted(cams)]
    return shape, views, cloud
