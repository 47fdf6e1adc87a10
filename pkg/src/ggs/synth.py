"""Synthetic test scenes: analytic shapes ray-cast with procedural texture.

Provides deterministic multi-view fixtures (textured plane, sphere, open
tube) with exact geometry, plus Gaussian-cloud fixtures laid out on those
surfaces. ``python -m ggs.synth`` writes a scene to disk in the formats
the CLI consumes.
"""

from __future__ import annotations

import argparse
import os
from dataclasses import dataclass

import numpy as np

from .core import (CameraModel, DensePointCloud, GaussianCloud, logit,
                   rotation_matrix_to_quat)
from . import io


# ---------------------------------------------------------------------------
# Deterministic value-noise texture
# ---------------------------------------------------------------------------

def _hash_lattice(ix, iy, iz, seed):
    seed_mix = (int(seed) * 0x2545F4914F6CDD1D) & 0xFFFFFFFFFFFFFFFF
    v = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
         ^ iz.astype(np.uint64) * np.uint64(0x94D049BB133111EB)
         ^ np.uint64(seed_mix))
    v ^= v >> np.uint64(30)
    v *= np.uint64(0xBF58476D1CE4E5B9)
    v ^= v >> np.uint64(27)
    v *= np.uint64(0x94D049BB133111EB)
    v ^= v >> np.uint64(31)
    return v.astype(np.float64) / float(2 ** 64)


def value_noise(points: np.ndarray, scale: float = 4.0, octaves: int = 3,
                seed: int = 0) -> np.ndarray:
    """Smooth deterministic noise in [0,1] at 3D points, (N,) output."""
    pts = np.atleast_2d(points)
    out = np.zeros(len(pts))
    amp_total = 0.0
    for oct_i in range(octaves):
        freq = scale * (2.0 ** oct_i)
        amp = 0.5 ** oct_i
        p = pts * freq + 1000.0  # keep lattice indices positive
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        f = f * f * (3.0 - 2.0 * f)  # smoothstep
        acc = np.zeros(len(pts))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    h = _hash_lattice(i0[:, 0] + dx, i0[:, 1] + dy,
                                      i0[:, 2] + dz, seed + oct_i)
                    wgt = (np.where(dx, f[:, 0], 1 - f[:, 0])
                           * np.where(dy, f[:, 1], 1 - f[:, 1])
                           * np.where(dz, f[:, 2], 1 - f[:, 2]))
                    acc += h * wgt
        out += amp * acc
        amp_total += amp
    return out / amp_total


# ---------------------------------------------------------------------------
# Analytic shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    """Plane z = z0 in world coordinates, finite square extent."""

    z0: float = 0.0
    half_extent: float = 2.0

    def intersect(self, origins, dirs):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.z0 - origins[:, 2]) / dz
        pts = origins + s[:, None] * dirs
        ok = (np.abs(dz) > 1e-12) & (s > 1e-6) \
            & (np.abs(pts[:, 0]) <= self.half_extent) \
            & (np.abs(pts[:, 1]) <= self.half_extent)
        normals = np.zeros_like(pts)
        normals[:, 2] = -np.sign(dz + (dz == 0))
        return ok, s, pts, normals

    def sample(self, n, rng):
        xy = rng.uniform(-self.half_extent, self.half_extent, (n, 2))
        pts = np.column_stack([xy, np.full(n, self.z0)])
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        return pts, normals


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center)
        a = np.sum(dirs * dirs, axis=1)
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s1 = (-b - sq) / a
        s2 = (-b + sq) / a
        s = np.where(s1 > 1e-6, s1, s2)
        ok &= s > 1e-6
        pts = origins + s[:, None] * dirs
        normals = pts - np.asarray(self.center)
        normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-30)
        return ok, s, pts, normals

    def sample(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v, v


@dataclass(frozen=True)
class Tube:
    """Open cylinder around the z axis: no end caps, two boundary rings."""

    radius: float = 0.8
    z_min: float = -1.0
    z_max: float = 1.0

    def intersect(self, origins, dirs):
        ox, oy = origins[:, 0], origins[:, 1]
        dx, dy = dirs[:, 0], dirs[:, 1]
        a = dx * dx + dy * dy
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - a * c
        ok0 = (disc >= 0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok0, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            s1 = (-b - sq) / a
            s2 = (-b + sq) / a
        best = np.full(len(origins), np.inf)
        for s in (s1, s2):
            z = origins[:, 2] + s * dirs[:, 2]
            valid = ok0 & (s > 1e-6) & (z >= self.z_min) & (z <= self.z_max)
            best = np.where(valid & (s < best), s, best)
        ok = np.isfinite(best)
        s = np.where(ok, best, 0.0)
        pts = origins + s[:, None] * dirs
        normals = np.zeros_like(pts)
        rn = np.maximum(np.hypot(pts[:, 0], pts[:, 1]), 1e-30)
        normals[:, 0] = pts[:, 0] / rn
        normals[:, 1] = pts[:, 1] / rn
        # orient outward/inward toward the viewer
        flip = np.sum(normals * dirs, axis=1) > 0
        normals[flip] *= -1.0
        return ok, s, pts, normals

    def sample(self, n, rng):
        theta = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(self.z_min, self.z_max, n)
        pts = np.column_stack([self.radius * np.cos(theta),
                               self.radius * np.sin(theta), z])
        normals = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
        return pts, normals


# ---------------------------------------------------------------------------
# Cameras and rendering
# ---------------------------------------------------------------------------

def look_at_camera(position, target, width, height, focal,
                   world_up=(0.0, 0.0, 1.0)) -> CameraModel:
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(world_up, dtype=np.float64)
    down = -(up - fwd * np.dot(fwd, up))
    nrm = np.linalg.norm(down)
    if nrm < 1e-9:  # looking straight along up; pick another reference
        down = np.array([0.0, -1.0, 0.0])
        down -= fwd * np.dot(fwd, down)
        nrm = np.linalg.norm(down)
    down /= nrm
    right = np.cross(down, fwd)
    R = np.stack([right, down, fwd])  # rows: camera x, y, z in world
    t = -R @ pos
    return CameraModel(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                       rotation_matrix_to_quat(R), t, width, height)


def ring_cameras(n_views, radius, height, width, image_h, focal,
                 target=(0, 0, 0), elevation_wobble=0.0) -> dict[int, CameraModel]:
    cams = {}
    for i in range(n_views):
        theta = 2 * np.pi * i / n_views
        dz = elevation_wobble * np.sin(3 * theta)
        pos = np.array([radius * np.cos(theta), radius * np.sin(theta), height + dz])
        cams[i] = look_at_camera(pos, target, width, image_h, focal)
    return cams


def render_view(shape, cam: CameraModel, texture_seed: int = 0,
                texture_scale: float = 4.0, bg: float = 0.0):
    """Ray-cast one view: (H,W,3) image in [0,1] and (H,W) depth map."""
    H, W = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    dirs_cam = np.stack([(us.ravel() - cam.cx) / cam.fx,
                         (vs.ravel() - cam.cy) / cam.fy,
                         np.ones(H * W)], axis=1)
    R = cam.rotation_matrix
    dirs = dirs_cam @ R  # R^T applied to rows
    center = cam.center
    origins = np.tile(center, (H * W, 1))
    ok, s, pts, _ = shape.intersect(origins, dirs)

    shade = np.full(H * W, bg)
    if ok.any():
        tex = value_noise(pts[ok], scale=texture_scale, seed=texture_seed)
        shade[ok] = 0.15 + 0.7 * tex
    img = shade.reshape(H, W)[:, :, None].repeat(3, axis=2)

    depth = np.zeros(H * W)
    depth[ok] = (s * dirs_cam[:, 2])[ok]  # z-depth = s since dir z-component is 1
    return img, depth.reshape(H, W)


def make_scene(shape, cams: dict[int, CameraModel], texture_seed: int = 0,
               texture_scale: float = 4.0, n_cloud: int = 20000,
               seed: int = 0, bg: float = 0.0):
    """Images, depths, and an exact oriented surface cloud for a shape."""
    images, depths = {}, {}
    for vid, cam in cams.items():
        img, dep = render_view(shape, cam, texture_seed, texture_scale, bg=bg)
        images[vid] = img
        depths[vid] = dep
    rng = np.random.default_rng(seed)
    pts, normals = shape.sample(n_cloud, rng)
    return images, depths, DensePointCloud(pts, normals)


# ---------------------------------------------------------------------------
# Gaussian fixtures on analytic surfaces
# ---------------------------------------------------------------------------

def _rotation_from_normal(n: np.ndarray) -> np.ndarray:
    """Quaternion whose rotation maps the z axis onto ``n``."""
    n = n / np.linalg.norm(n)
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return rotation_matrix_to_quat(np.stack([t1, t2, n], axis=1))


def gaussians_on_surface(shape, n: int, seed: int = 0,
                         tangent_scale: float | None = None,
                         normal_scale_frac: float = 0.1,
                         opacity: float = 0.9,
                         color: tuple = (0.7, 0.7, 0.7)) -> GaussianCloud:
    """Flattened Gaussian disks tangent to a shape's surface."""
    rng = np.random.default_rng(seed)
    pts, normals = shape.sample(n, rng)
    if tangent_scale is None:
        # rough spacing so neighbors overlap: sqrt(area/n) heuristic
        span = pts.max(axis=0) - pts.min(axis=0)
        tangent_scale = 1.5 * float(np.sqrt(np.prod(np.sort(span)[-2:]) / max(n, 1)))
    rots = np.stack([_rotation_from_normal(nm) for nm in normals])
    ls = np.log(np.array([tangent_scale, tangent_scale,
                          tangent_scale * normal_scale_frac]))
    return GaussianCloud(pts, rots, np.tile(ls, (n, 1)),
                         np.full(n, logit(opacity)), np.tile(color, (n, 1)))


# ---------------------------------------------------------------------------
# Scene writer (fixture/demo entry point)
# ---------------------------------------------------------------------------

SHAPES = {
    "plane": lambda: Plane(z0=0.0, half_extent=1.6),
    "sphere": lambda: Sphere(radius=1.0),
    "tube": lambda: Tube(radius=0.8, z_min=-0.9, z_max=0.9),
}


def write_scene(out_dir, shape_name: str = "tube", n_views: int = 16,
                width: int = 160, height: int = 120, focal: float = 140.0,
                ring_radius: float = 3.0, ring_height: float = 0.4,
                texture_seed: int = 7, n_cloud: int = 20000, seed: int = 0) -> dict:
    """Write images/, cameras.txt, gt_cloud.ply and gt depth PFMs."""
    if shape_name not in SHAPES:
        raise ValueError(f"unknown shape '{shape_name}'")
    shape = SHAPES[shape_name]()
    cams = ring_cameras(n_views, ring_radius, ring_height, width, height, focal)
    images, depths, cloud = make_scene(shape, cams, texture_seed=texture_seed,
                                       n_cloud=n_cloud, seed=seed)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    for vid in sorted(cams):
        io.write_png(images[vid], os.path.join(img_dir, f"{vid:04d}.png"))
        io.write_pfm(depths[vid], os.path.join(out_dir, f"gt_depth_{vid:04d}.pfm"))
    io.write_cameras_txt(cams, os.path.join(out_dir, "cameras.txt"))
    io.write_point_cloud_ply(cloud, os.path.join(out_dir, "gt_cloud.ply"))
    return {"images": img_dir, "cameras": os.path.join(out_dir, "cameras.txt"),
            "gt_cloud": os.path.join(out_dir, "gt_cloud.ply"), "shape": shape}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="generate a synthetic multi-view scene")
    ap.add_argument("--out", required=True)
    ap.add_argument("--shape", default="tube", choices=sorted(SHAPES))
    ap.add_argument("--views", type=int, default=16)
    ap.add_argument("--width", type=int, default=160)
    ap.add_argument("--height", type=int, default=120)
    ap.add_argument("--focal", type=float, default=140.0)
    ap.add_argument("--cloud-points", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_scene(args.out, args.shape, args.views, args.width, args.height,
                args.focal, n_cloud=args.cloud_points, seed=args.seed)
    print(f"scene written to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
