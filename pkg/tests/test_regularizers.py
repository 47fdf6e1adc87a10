import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggs.core import GaussianCloud, InvalidInputError
from ggs.regularizers import (GradientSet, alignment_gradients, analytic_gradients,
                              disk_normal, disk_normals, loss_normal,
                              loss_normal_cloud, loss_thin, loss_thin_cloud,
                              thinness_gradients, total_loss)

from helpers import central_fd, random_gaussian_cloud, rel_errors
from test_core import make_primitive


def random_unit(rng, n=1):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestLossThin:
    def test_direct_min(self):
        g = make_primitive(log_scale=np.log([0.5, 2.0, 3.0]))
        assert loss_thin(g) == pytest.approx(0.5, rel=1e-12)

    def test_tie(self):
        g = make_primitive(log_scale=np.log([1.0, 1.0, 1.0]))
        assert loss_thin(g) == pytest.approx(1.0, rel=1e-12)

    def test_gradient_only_on_argmin_and_fd(self):
        rng = np.random.default_rng(0)
        cloud = random_gaussian_cloud(rng, 8)
        grads = thinness_gradients(cloud)
        k = np.argmin(cloud.log_scales, axis=1)
        mask = np.zeros((8, 3), dtype=bool)
        mask[np.arange(8), k] = True
        assert np.all(grads.log_scales[~mask] == 0.0)

        ls = cloud.log_scales.copy()

        def f():
            return loss_thin_cloud(cloud.replace(log_scales=ls))

        fd = central_fd(f, ls, 1e-6)
        assert rel_errors(grads.log_scales, fd).max() < 1e-5

    def test_strictly_decreasing_in_argmin(self):
        g = make_primitive(log_scale=np.log([0.5, 2.0, 3.0]))
        lower = make_primitive(log_scale=np.log([0.4, 2.0, 3.0]))
        assert loss_thin(lower) < loss_thin(g)


class TestDiskNormal:
    def test_identity_min_z(self):
        g = make_primitive(log_scale=np.log([2.0, 3.0, 0.1]))
        assert np.allclose(disk_normal(g), [0, 0, 1])

    def test_rotated_90_about_x(self):
        # z axis maps to (0, -1, 0) under this quaternion's rotation? verify
        # against the rotation matrix itself rather than hand sign conventions
        q = np.array([np.cos(np.pi / 4), np.sin(np.pi / 4), 0, 0])
        g = make_primitive(rotation=q, log_scale=np.log([2.0, 3.0, 0.1]))
        from ggs.core import quat_to_rotation_matrix
        expected = quat_to_rotation_matrix(q)[:, 2]
        assert np.allclose(disk_normal(g), expected, atol=1e-12)
        assert np.allclose(expected, [0, -1, 0], atol=1e-9) or \
            np.allclose(expected, [0, 1, 0], atol=1e-9)

    def test_tie_lowest_index(self):
        g = make_primitive(log_scale=np.log([1.0, 1.0, 1.0]))
        assert np.allclose(disk_normal(g), [1, 0, 0])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        cloud = random_gaussian_cloud(rng, 12)
        batch = disk_normals(cloud)
        for i in range(12):
            assert np.allclose(batch[i], disk_normal(cloud.primitive(i)),
                               atol=1e-14)


class TestLossNormal:
    def test_aligned(self):
        assert loss_normal([0, 0, 1], [0, 0, 1]) == 0.0

    def test_antiparallel(self):
        assert loss_normal([0, 0, -1], [0, 0, 1]) == 0.0

    def test_orthogonal(self):
        assert loss_normal([1, 0, 0], [0, 0, 1]) == 1.0

    def test_zero_vector_rejected(self):
        with pytest.raises(InvalidInputError):
            loss_normal([0, 0, 0], [0, 0, 1])

    def test_non_unit_normalized(self):
        assert loss_normal([0, 0, 5.0], [0, 0, 0.2]) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=6, max_size=6)
           .filter(lambda v: np.linalg.norm(v[:3]) > 1e-2
                   and np.linalg.norm(v[3:]) > 1e-2))
    def test_bounds_and_sign_invariance(self, v):
        n = np.array(v[:3])
        m = np.array(v[3:])
        val = loss_normal(n, m)
        assert 0.0 <= val <= 1.0 + 1e-12
        assert loss_normal(-n, m) == pytest.approx(val, abs=1e-12)
        assert loss_normal(n, -m) == pytest.approx(val, abs=1e-12)


class TestTotalLoss:
    def test_weighted_sum(self):
        # force the arithmetic with a crafted cloud: one primitive,
        # min scale 0.01, orthogonal pairing normal -> l_normal = 1 scaled
        g = make_primitive(log_scale=np.log([0.01, 1.0, 1.0]))
        cloud = GaussianCloud.from_primitives([g])
        # disk normal = x axis; pairing normal chosen so 1-|m.n| = 0.2
        m = np.array([[0.8, 0.6, 0.0]])
        bd = total_loss(0.05, cloud, m, alpha=100.0, beta=0.1)
        assert bd.l_thin == pytest.approx(0.01, rel=1e-12)
        assert bd.l_normal == pytest.approx(0.2, rel=1e-12)
        assert bd.total == pytest.approx(0.05 + 100 * 0.01 + 0.1 * 0.2, rel=1e-12)
        assert bd.total == pytest.approx(1.07, rel=1e-12)

    def test_flat_aligned_equals_rgb(self):
        rng = np.random.default_rng(2)
        cloud = random_gaussian_cloud(rng, 5)
        # zero out thinness by scaling min axis to exp(-700)~0 (still positive)
        ls = cloud.log_scales.copy()
        k = np.argmin(ls, axis=1)
        ls[np.arange(5), k] = -700.0
        cloud = cloud.replace(log_scales=ls)
        m = disk_normals(cloud)
        bd = total_loss(0.123, cloud, m)
        assert bd.total == pytest.approx(0.123, abs=1e-12)

    def test_zero_weights(self):
        rng = np.random.default_rng(3)
        cloud = random_gaussian_cloud(rng, 5)
        m = random_unit(rng, 5)
        bd = total_loss(0.7, cloud, m, alpha=0.0, beta=0.0)
        assert bd.total == 0.7

    def test_alpha_linearity(self):
        rng = np.random.default_rng(4)
        cloud = random_gaussian_cloud(rng, 6)
        m = random_unit(rng, 6)
        b1 = total_loss(0.0, cloud, m, alpha=50.0, beta=0.0)
        b2 = total_loss(0.0, cloud, m, alpha=100.0, beta=0.0)
        assert b2.total == pytest.approx(2.0 * b1.total, rel=1e-12)

    def test_cardinality_mismatch(self):
        cloud = random_gaussian_cloud(np.random.default_rng(5), 4)
        with pytest.raises(InvalidInputError):
            total_loss(0.0, cloud, np.zeros((3, 3)))

    def test_terms_nonnegative(self):
        rng = np.random.default_rng(6)
        cloud = random_gaussian_cloud(rng, 10)
        bd = total_loss(0.0, cloud, random_unit(rng, 10))
        assert bd.l_thin >= 0 and bd.l_normal >= 0 and bd.total >= 0


class TestAnalyticGradients:
    def test_zero_weights_equal_photometric(self):
        rng = np.random.default_rng(7)
        cloud = random_gaussian_cloud(rng, 6)
        phot = GradientSet(rng.normal(size=(6, 3)), rng.normal(size=(6, 4)),
                           rng.normal(size=(6, 3)), rng.normal(size=6),
                           rng.normal(size=(6, 3)))
        out = analytic_gradients(cloud, random_unit(rng, 6), phot,
                                 alpha=0.0, beta=0.0)
        assert np.array_equal(out.positions, phot.positions)
        assert np.array_equal(out.rotations, phot.rotations)
        assert np.array_equal(out.log_scales, phot.log_scales)

    def _fd_config(self, seed):
        rng = np.random.default_rng(seed)
        n = 5
        while True:
            cloud = random_gaussian_cloud(rng, n)
            m = random_unit(rng, n)
            dots = np.abs(np.sum(disk_normals(cloud) * m, axis=1))
            if dots.min() > 1e-3:  # stay away from the |.| kink
                return cloud, m

    @pytest.mark.parametrize("seed", range(10))
    def test_fd_over_regularizer_terms(self, seed):
        cloud, m = self._fd_config(seed)
        alpha, beta = 100.0, 0.1
        grads = analytic_gradients(cloud, m, None, alpha=alpha, beta=beta)

        ls = cloud.log_scales.copy()
        rot = cloud.rotations.copy()

        def f():
            c = cloud.replace(log_scales=ls, rotations=rot)
            return (alpha * loss_thin_cloud(c)
                    + beta * loss_normal_cloud(c, m))

        fd_ls = central_fd(f, ls, 1e-6)
        fd_rot = central_fd(f, rot, 1e-6)
        assert rel_errors(grads.log_scales, fd_ls).max() < 1e-5
        assert rel_errors(grads.rotations, fd_rot).max() < 1e-5
        assert np.all(grads.positions == 0)
        assert np.all(grads.colors == 0)
        assert np.all(grads.opacity_logits == 0)

    def test_antiparallel_stationary(self):
        # gradient magnitude near an exactly antiparallel pairing is ~0
        rng = np.random.default_rng(11)
        cloud = random_gaussian_cloud(rng, 4)
        m = -disk_normals(cloud)
        grads = alignment_gradients(cloud, m)
        rot = cloud.rotations.copy()

        def f():
            return loss_normal_cloud(cloud.replace(rotations=rot), m)

        fd = central_fd(f, rot, 1e-6)
        assert np.abs(fd).max() < 1e-4
        assert np.abs(grads.rotations).max() < 1e-9

    def test_alignment_gradient_rotation_only(self):
        rng = np.random.default_rng(12)
        cloud = random_gaussian_cloud(rng, 5)
        g = alignment_gradients(cloud, random_unit(rng, 5))
        assert np.all(g.positions == 0)
        assert np.all(g.log_scales == 0)
        assert np.any(g.rotations != 0)
