"""Fast geometry-only multi-view stereo.

Depth maps come from a fronto-parallel plane sweep scored by windowed NCC
at reduced resolution; a bounded number of multi-view consistency passes
filters them, and surviving pixels fuse into an oriented point cloud.
Color never enters the pipeline: positions and normals only.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial import cKDTree

from .core import CameraModel, DensePointCloud, GgsError, InvalidInputError

log = logging.getLogger(__name__)

NCC_EPS = 1e-8
MIN_NCC = 0.3


@dataclass(frozen=True)
class View:
    """One input view: integer id, camera, image (gray or RGB floats)."""

    view_id: int
    camera: CameraModel
    image: np.ndarray


@dataclass
class DepthMap:
    """Per-pixel depth in world units at working resolution; 0 = invalid."""

    depth: np.ndarray
    view_id: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.depth)):
            raise InvalidInputError("depth map contains non-finite values")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0.0

    def copy(self) -> "DepthMap":
        return DepthMap(self.depth.copy(), self.view_id)


@dataclass
class MvsConfig:
    downsample: int = 4
    num_planes: int = 128
    depth_min: float = 1.0
    depth_max: float = 4.0
    ncc_window: int = 7
    num_neighbors: int = 4
    min_consistent: int = 2          # k: neighbor maps that must agree
    pixel_tolerance: float = 1.0     # px at working resolution
    depth_tolerance: float = 0.01    # relative
    consistency_iterations: int = 1

    def __post_init__(self):
        if self.depth_min <= 0 or self.depth_max <= self.depth_min:
            raise InvalidInputError("need 0 < depth_min < depth_max")
        if self.ncc_window % 2 != 1:
            raise InvalidInputError("NCC window must be odd")
        if self.min_consistent < 1:
            raise InvalidInputError("min_consistent must be >= 1")

    def plane_depths(self) -> np.ndarray:
        """Hypothesis depths spaced uniformly in inverse depth."""
        inv = np.linspace(1.0 / self.depth_max, 1.0 / self.depth_min,
                          self.num_planes)
        return 1.0 / inv

    @property
    def inv_depth_step(self) -> float:
        return (1.0 / self.depth_min - 1.0 / self.depth_max) / max(self.num_planes - 1, 1)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


def _block_average(img: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return img
    h = (img.shape[0] // f) * f
    w = (img.shape[1] // f) * f
    return img[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sample img at continuous (u,v); returns (values, validity)."""
    h, w = img.shape
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1.000001)
    vc = np.clip(v, 0, h - 1.000001)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    fu = uc - u0
    fv = vc - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    vals = (img[v0, u0] * (1 - fu) * (1 - fv) + img[v0, u1] * fu * (1 - fv)
            + img[v1, u0] * (1 - fu) * fv + img[v1, u1] * fu * fv)
    return vals, valid


def select_neighbors(view_id: int, cameras: dict[int, CameraModel],
                     count: int) -> list[int]:
    """Nearest camera centers; identical poses are a hard error."""
    ref = cameras[view_id]
    ref_c = ref.center
    dists = []
    for vid, cam in cameras.items():
        if vid == view_id:
            continue
        d = float(np.linalg.norm(cam.center - ref_c))
        dists.append((d, vid))
    dists.sort()
    chosen = [vid for _, vid in dists[:count]]
    for d, vid in dists[:count]:
        if d < 1e-12:
            raise GgsError(f"degenerate baseline: views {view_id} and {vid} "
                           "have identical camera centers")
    return chosen


def _window_stats(img, w):
    """Windowed sums needed for NCC over the trailing two axes."""
    size = (1,) * (img.ndim - 2) + (w, w)
    return uniform_filter(img, size=size, mode="constant", cval=0.0)


def estimate_depth(ref: View, neighbors: list[View], config: MvsConfig) -> DepthMap:
    """Winner-take-all plane-sweep depth for one reference view.

    The best hypothesis maximizes mean NCC across neighbors; windows
    crossing the image border or containing out-of-view warps are
    invalid, and pixels whose best score is below 0.3 are dropped.
    """
    if not neighbors:
        raise InvalidInputError("plane sweep needs at least one neighbor view")
    f = config.downsample
    ref_cam = ref.camera.scaled(f)
    ref_gray = _block_average(_to_gray(ref.image), f)
    H, W = ref_gray.shape
    if (H, W) != (ref_cam.height, ref_cam.width):
        ref_gray = ref_gray[:ref_cam.height, :ref_cam.width]

    for nb in neighbors:
        if (np.allclose(nb.camera.center, ref.camera.center)
                and np.allclose(nb.camera.rotation, ref.camera.rotation)):
            raise GgsError(f"degenerate baseline: views {ref.view_id} and "
                           f"{nb.view_id} have identical poses")

    depths = config.plane_depths()
    D = len(depths)
    w = config.ncc_window
    n_win = float(w * w)

    # Reference rays scaled by each hypothesis depth -> (D,H,W,3) points.
    us, vs = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    rays = np.stack([(us - ref_cam.cx) / ref_cam.fx,
                     (vs - ref_cam.cy) / ref_cam.fy,
                     np.ones_like(us)], axis=-1)
    R_ref = ref_cam.rotation_matrix

    ref_sum = _window_stats(ref_gray, w)
    ref_sq = _window_stats(ref_gray * ref_gray, w)

    score_sum = np.zeros((D, H, W))
    score_cnt = np.zeros((D, H, W))

    for nb in neighbors:
        nb_cam = nb.camera.scaled(f)
        nb_gray = _block_average(_to_gray(nb.image), f)[:nb_cam.height, :nb_cam.width]
        R_rel = nb_cam.rotation_matrix @ R_ref.T
        t_rel = nb_cam.translation - R_rel @ ref_cam.translation

        warped = np.empty((D, H, W))
        valid = np.empty((D, H, W), dtype=bool)
        base = rays @ R_rel.T  # camera-frame direction part, (H,W,3)
        for di, d in enumerate(depths):
            pc = base * d + t_rel
            z = pc[:, :, 2]
            in_front = z > 1e-9
            zsafe = np.where(in_front, z, 1.0)
            u = nb_cam.fx * pc[:, :, 0] / zsafe + nb_cam.cx
            v = nb_cam.fy * pc[:, :, 1] / zsafe + nb_cam.cy
            vals, ok = _bilinear(nb_gray, u.ravel(), v.ravel())
            warped[di] = vals.reshape(H, W)
            valid[di] = (ok.reshape(H, W)) & in_front

        wf = warped * valid
        cnt = _window_stats(valid.astype(np.float64), w)
        full = cnt >= (n_win - 0.5) / n_win  # uniform_filter returns means
        nb_sum = _window_stats(wf, w)
        nb_sq = _window_stats(wf * wf, w)
        cross = _window_stats(ref_gray[None] * wf, w)

        var_r = ref_sq - ref_sum * ref_sum
        var_n = nb_sq - nb_sum * nb_sum
        cov = cross - ref_sum[None] * nb_sum
        ncc = cov / np.sqrt(np.maximum(var_r[None] * var_n, 0.0) + NCC_EPS)

        score_sum += np.where(full, ncc, 0.0)
        score_cnt += full

    with np.errstate(invalid="ignore"):
        mean_score = np.where(score_cnt > 0, score_sum / np.maximum(score_cnt, 1),
                              -np.inf)
    best_plane = np.argmax(mean_score, axis=0)
    best_score = np.take_along_axis(mean_score, best_plane[None], axis=0)[0]

    depth = depths[best_plane]
    ok = best_score >= MIN_NCC
    half = w // 2
    border = np.zeros((H, W), dtype=bool)
    border[half:H - half, half:W - half] = True
    ok &= border
    return DepthMap(np.where(ok, depth, 0.0), ref.view_id)


def consistency_filter(depth_maps: list[DepthMap], cameras: dict[int, CameraModel],
                       config: MvsConfig) -> list[DepthMap]:
    """Keep pixels whose 3D point agrees with enough neighbor maps.

    Agreement: the point reprojects into a neighbor map within the pixel
    tolerance (after a round trip back into the reference view) and the
    neighbor's stored depth matches within the relative tolerance. Runs
    the configured number of iterations; each pass only removes pixels.
    """
    scaled = {vid: cameras[vid].scaled(config.downsample) for vid in cameras}
    maps = {dm.view_id: dm.copy() for dm in depth_maps}
    order = [dm.view_id for dm in depth_maps]

    if len(maps) == 1:
        log.warning("consistency filter with a single view drops everything")
        only = maps[order[0]]
        return [DepthMap(np.zeros_like(only.depth), only.view_id)]

    for _ in range(max(config.consistency_iterations, 0)):
        new_maps = {}
        for vid in order:
            dm = maps[vid]
            cam = scaled[vid]
            ys, xs = np.nonzero(dm.valid)
            if len(ys) == 0:
                new_maps[vid] = dm.copy()
                continue
            d = dm.depth[ys, xs]
            pts = cam.back_project(np.stack([xs, ys], axis=1), d)
            neighbors = select_neighbors(vid, cameras, config.num_neighbors)
            agree = np.zeros(len(ys), dtype=np.int64)
            for nb in neighbors:
                nb_cam = scaled[nb]
                nb_dm = maps[nb]
                uv, z = nb_cam.project(pts)
                ui = np.round(uv[:, 0]).astype(np.int64)
                vi = np.round(uv[:, 1]).astype(np.int64)
                inb = ((z > 0) & (ui >= 0) & (ui < nb_cam.width)
                       & (vi >= 0) & (vi < nb_cam.height))
                nb_depth = np.zeros(len(ys))
                nb_depth[inb] = nb_dm.depth[vi[inb], ui[inb]]
                has = inb & (nb_depth > 0)
                rel = np.abs(nb_depth - z) / np.maximum(nb_depth, 1e-12)
                depth_ok = has & (rel <= config.depth_tolerance)
                # round trip: neighbor's stored point back into this view
                back = np.zeros((len(ys), 2))
                if has.any():
                    nb_pts = nb_cam.back_project(
                        np.stack([ui[has], vi[has]], axis=1), nb_depth[has])
                    back_uv, _ = cam.project(nb_pts)
                    back[has] = back_uv
                px_err = np.hypot(back[:, 0] - xs, back[:, 1] - ys)
                agree += (depth_ok & (px_err <= config.pixel_tolerance)).astype(np.int64)
            keep = agree >= config.min_consistent
            nd = np.zeros_like(dm.depth)
            nd[ys[keep], xs[keep]] = d[keep]
            new_maps[vid] = DepthMap(nd, vid)
        maps = new_maps
    return [maps[vid] for vid in order]


def fuse(depth_maps: list[DepthMap], cameras: dict[int, CameraModel],
         config: MvsConfig, _return_sources: bool = False):
    """Back-project surviving pixels and merge into an oriented cloud.

    Duplicates within a voxel the size of the median point spacing are
    averaged; normals come from PCA over 16 neighbors, oriented to face
    each point's source camera.
    """
    scaled = {vid: cameras[vid].scaled(config.downsample) for vid in cameras}
    all_pts, all_src = [], []
    for dm in depth_maps:
        cam = scaled[dm.view_id]
        ys, xs = np.nonzero(dm.valid)
        if len(ys) == 0:
            continue
        pts = cam.back_project(np.stack([xs, ys], axis=1), dm.depth[ys, xs])
        all_pts.append(pts)
        all_src.append(np.full(len(pts), dm.view_id, dtype=np.int64))
    if not all_pts:
        raise GgsError("fusion produced no points; relax the consistency "
                       "tolerances or lower the NCC threshold")
    pts = np.concatenate(all_pts)
    src = np.concatenate(all_src)

    # Median nearest-neighbor spacing sets the merge voxel size.
    sample = pts if len(pts) <= 50000 else pts[:: len(pts) // 50000 + 1]
    if len(sample) > 1:
        tree = cKDTree(sample)
        dist, _ = tree.query(sample, k=2)
        voxel = float(np.median(dist[:, 1]))
    else:
        voxel = 1.0
    if voxel > 0:
        lo = pts.min(axis=0)
        key = np.floor((pts - lo) / voxel).astype(np.int64)
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True,
                                       return_counts=True)
        merged = np.zeros((len(counts), 3))
        np.add.at(merged, inverse, pts)
        merged /= counts[:, None]
        # source view of a merged point: first contributor in scan order
        first = np.full(len(counts), len(pts), dtype=np.int64)
        np.minimum.at(first, inverse, np.arange(len(pts)))
        merged_src = src[first]
    else:
        merged, merged_src = pts, src

    normals = _pca_normals(merged, merged_src, scaled)
    cloud = DensePointCloud(merged, normals)
    if _return_sources:
        return cloud, merged_src
    return cloud


def _pca_normals(points: np.ndarray, sources: np.ndarray,
                 scaled_cams: dict[int, CameraModel], k: int = 16) -> np.ndarray:
    k_eff = min(k, len(points) - 1)
    if k_eff < 2:
        # Too few points for a plane fit; face the camera directly.
        normals = np.zeros_like(points)
        for i, p in enumerate(points):
            v = p - scaled_cams[int(sources[i])].center
            n = np.linalg.norm(v)
            normals[i] = -v / n if n > 0 else (0, 0, 1)
        return normals
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k_eff + 1)
    nbrs = points[idx]                      # (N, k+1, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nka,nkb->nab", centered, centered)
    _, vecs = np.linalg.eigh(cov)           # ascending eigenvalues
    normals = vecs[:, :, 0]                 # smallest-eigenvector
    cam_centers = np.stack([scaled_cams[int(s)].center for s in sources])
    toward = points - cam_centers           # viewing direction, camera -> point
    flip = np.sum(normals * toward, axis=1) > 0
    normals[flip] *= -1.0
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lens, 1e-30)


def reconstruct(views: list[View], config: MvsConfig,
                threads: int = 1) -> tuple[DensePointCloud, dict]:
    """Full pipeline: sweep every view, filter, fuse. Returns (cloud, timings)."""
    if len(views) < 2:
        raise InvalidInputError("reconstruction needs at least two views")
    cameras = {v.view_id: v.camera for v in views}
    by_id = {v.view_id: v for v in views}
    timings = {}

    t0 = time.perf_counter()
    order = [v.view_id for v in views]

    def sweep(vid):
        nbr_ids = select_neighbors(vid, cameras, config.num_neighbors)
        return estimate_depth(by_id[vid], [by_id[i] for i in nbr_ids], config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            depth_maps = list(pool.map(sweep, order))
    else:
        depth_maps = [sweep(vid) for vid in order]
    timings["depth_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    filtered = consistency_filter(depth_maps, cameras, config)
    timings["filter_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cloud = fuse(filtered, cameras, config)
    timings["fuse_s"] = time.perf_counter() - t0
    log.info("mvs: %d points (depth %.2fs, filter %.2fs, fuse %.2fs)",
             len(cloud), timings["depth_s"], timings["filter_s"], timings["fuse_s"])
    return cloud, timings
