import numpy as np
import pytest

from ggs.core import DensePointCloud, GaussianCloud, InvalidInputError
from ggs.guidance import (build_index, nearest, pair_gaussians, paired_normals,
                          snap_gaussians)

from helpers import brute_force_nearest, random_gaussian_cloud


def make_cloud(points, normals=None):
    points = np.atleast_2d(np.asarray(points, float))
    if normals is None:
        normals = np.tile([0.0, 0.0, 1.0], (len(points), 1))
    return DensePointCloud(points, normals)


class TestBuildIndex:
    def test_empty_cloud_rejected(self):
        with pytest.raises(InvalidInputError):
            build_index(make_cloud(np.zeros((0, 3))))

    def test_singleton(self):
        idx = build_index(make_cloud([[1.0, 2.0, 3.0]]))
        for q in ([0, 0, 0], [5, 5, 5], [1, 2, 3]):
            i, _ = nearest(idx, q)
            assert i == 0

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (10000, 3))
        idx = build_index(make_cloud(pts))
        for q in rng.uniform(-1.2, 1.2, (100, 3)):
            i, d = nearest(idx, q)
            bi, bd = brute_force_nearest(pts, q)
            assert i == bi
            assert d == bd

    def test_duplicates_and_exact_match(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 0, 0], [2, 0, 0]])
        idx = build_index(make_cloud(pts))
        i, d = nearest(idx, [1.0, 0, 0])
        assert d == 0.0
        assert i == 1  # lowest index among the duplicates

    def test_tie_breaks_to_lowest_index(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        idx = build_index(make_cloud(pts))
        i, d = nearest(idx, [0.0, 0, 0])
        assert i == 0
        assert d == 1.0


class TestNearest:
    def test_3_4_5_triangle(self):
        idx = build_index(make_cloud([[3.0, 4.0, 0.0]]))
        _, d = nearest(idx, [0.0, 0.0, 0.0])
        assert d == 5.0

    def test_cloud_point_query(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0]])
        idx = build_index(make_cloud(pts))
        i, d = nearest(idx, [0.9, 0.0, 0.0])
        assert i == 1
        assert d == pytest.approx(0.1, abs=1e-12)

    def test_never_beats_sampled_members(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(5000, 3))
        idx = build_index(make_cloud(pts))
        queries = rng.normal(size=(50, 3))
        sample = rng.integers(0, len(pts), 100)
        for q in queries:
            _, d = nearest(idx, q)
            best_sampled = np.sqrt(((pts[sample] - q) ** 2).sum(1)).min()
            assert d <= best_sampled + 1e-15


class TestSnap:
    def test_snap_exact_membership(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, (500, 3))
        cloud = make_cloud(pts)
        idx = build_index(cloud)
        gaussians = random_gaussian_cloud(rng, 40)
        snapped, pairing = snap_gaussians(gaussians, idx)
        # bitwise membership + all other fields untouched
        assert all(np.array_equal(snapped.positions[i], pts[pairing.indices[i]])
                   for i in range(len(snapped)))
        assert np.array_equal(snapped.rotations, gaussians.rotations)
        assert np.array_equal(snapped.log_scales, gaussians.log_scales)
        assert np.array_equal(snapped.opacity_logits, gaussians.opacity_logits)
        assert np.array_equal(snapped.colors, gaussians.colors)

    def test_fixed_point_when_on_cloud(self):
        pts = np.array([[0.5, 0.5, 0.5], [1.5, 0, 0]])
        idx = build_index(make_cloud(pts))
        g = random_gaussian_cloud(np.random.default_rng(3), 2)
        g = g.replace(positions=pts.copy())
        snapped, _ = snap_gaussians(g, idx)
        assert np.array_equal(snapped.positions, pts)

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        idx = build_index(make_cloud(rng.normal(size=(300, 3))))
        g = random_gaussian_cloud(rng, 25)
        once, _ = snap_gaussians(g, idx)
        twice, _ = snap_gaussians(once, idx)
        assert np.array_equal(once.positions, twice.positions)

    def test_pairing_matches_brute_force(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-2, 2, (10000, 3))
        idx = build_index(make_cloud(pts))
        g = random_gaussian_cloud(rng, 100)
        _, pairing = snap_gaussians(g, idx)
        for i in range(100):
            bi, bd = brute_force_nearest(pts, g.positions[i])
            assert pairing.indices[i] == bi
            assert pairing.distances[i] == bd

    def test_blend_factor(self):
        pts = np.array([[1.0, 0, 0]])
        idx = build_index(make_cloud(pts))
        g = random_gaussian_cloud(np.random.default_rng(6), 1)
        g = g.replace(positions=np.array([[0.0, 0, 0]]))
        half, _ = snap_gaussians(g, idx, blend=0.5)
        assert np.allclose(half.positions, [[0.5, 0, 0]])


class TestPairedNormals:
    def test_constant_normals(self):
        rng = np.random.default_rng(7)
        cloud = make_cloud(rng.normal(size=(50, 3)))
        idx = build_index(cloud)
        g = random_gaussian_cloud(rng, 10)
        pairing = pair_gaussians(g, idx)
        nrm = paired_normals(pairing, cloud)
        assert np.array_equal(nrm, np.tile([0, 0, 1.0], (10, 1)))

    def test_order_equivariance(self):
        rng = np.random.default_rng(8)
        normals = rng.normal(size=(60, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        cloud = make_cloud(rng.normal(size=(60, 3)), normals)
        idx = build_index(cloud)
        g = random_gaussian_cloud(rng, 20)
        perm = rng.permutation(20)
        shuffled = GaussianCloud(g.positions[perm], g.rotations[perm],
                                 g.log_scales[perm], g.opacity_logits[perm],
                                 g.colors[perm])
        n1 = paired_normals(pair_gaussians(g, idx), cloud)
        n2 = paired_normals(pair_gaussians(shuffled, idx), cloud)
        assert np.array_equal(n1[perm], n2)

    def test_sphere_radial_normals(self):
        rng = np.random.default_rng(9)
        dirs = rng.normal(size=(4000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cloud = make_cloud(dirs * 2.0, dirs)
        idx = build_index(cloud)
        g = random_gaussian_cloud(rng, 30)
        q = rng.normal(size=(30, 3))
        q = 2.0 * q / np.linalg.norm(q, axis=1, keepdims=True)
        g = g.replace(positions=q)
        pairing = pair_gaussians(g, idx)
        nrm = paired_normals(pairing, cloud)
        paired_pos = cloud.positions[pairing.indices]
        expected = paired_pos / np.linalg.norm(paired_pos, axis=1, keepdims=True)
        assert np.abs(nrm - expected).max() < 1e-6
