import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggs.core import (CameraModel, DensePointCloud, GaussianCloud,
                      GaussianPrimitive, InvalidInputError, TriangleMesh,
                      assemble_covariance, assemble_covariances, eval_density,
                      quat_rotation_with_derivative, quat_to_rotation_matrix,
                      quats_rotation_with_derivatives, rotation_matrix_to_quat,
                      sigmoid)

from helpers import central_fd, rel_errors


def make_primitive(position=(0, 0, 0), rotation=(1, 0, 0, 0),
                   log_scale=(0, 0, 0), opacity_logit=0.0, color=(0.5, 0.5, 0.5)):
    return GaussianPrimitive(np.array(position, float), np.array(rotation, float),
                             np.array(log_scale, float), opacity_logit,
                             np.array(color, float))


unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3)


class TestQuaternions:
    def test_identity(self):
        assert np.allclose(quat_to_rotation_matrix([1, 0, 0, 0]), np.eye(3))

    def test_z_rotation_90deg(self):
        R = quat_to_rotation_matrix([0.7071, 0, 0, 0.7071])
        assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(unit_quats)
    def test_orthonormal(self, q):
        R = quat_to_rotation_matrix(q)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InvalidInputError):
            quat_to_rotation_matrix([0, 0, 0, 0])

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            R = quat_to_rotation_matrix(q)
            q2 = rotation_matrix_to_quat(R)
            assert np.allclose(quat_to_rotation_matrix(q2), R, atol=1e-12)

    def test_rotation_derivative_matches_fd(self):
        # checks d(sum(R * W))/dq for random weightings W against central FD
        rng = np.random.default_rng(5)
        for _ in range(10):
            q = rng.normal(size=4) * 2.0
            _, dR = quat_rotation_with_derivative(q)
            weight = rng.normal(size=(3, 3))

            def weighted_sum():
                return float(np.sum(quat_to_rotation_matrix(q) * weight))

            fd = central_fd(weighted_sum, q, 1e-7)
            analytic = np.einsum("lab,ab->l", dR, weight)
            assert rel_errors(analytic, fd, floor=1e-7).max() < 1e-5

    def test_batched_derivative_matches_single(self):
        rng = np.random.default_rng(6)
        qs = rng.normal(size=(7, 4)) * 1.5
        Rb, dRb = quats_rotation_with_derivatives(qs)
        for i, q in enumerate(qs):
            R, dR = quat_rotation_with_derivative(q)
            assert np.allclose(Rb[i], R, atol=1e-14)
            assert np.allclose(dRb[i], dR, atol=1e-14)


class TestCovariance:
    def test_diagonal_case(self):
        g = make_primitive(log_scale=np.log([1.0, 2.0, 3.0]))
        assert np.allclose(assemble_covariance(g), np.diag([1.0, 4.0, 9.0]))

    def test_rotated_diagonal(self):
        # 90 degrees about z swaps the x/y variances
        g = make_primitive(rotation=(np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)),
                           log_scale=np.log([1.0, 2.0, 1.0]))
        assert np.allclose(assemble_covariance(g), np.diag([4.0, 1.0, 1.0]),
                           atol=1e-12)

    def test_exactly_symmetric_and_spd(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = make_primitive(rotation=rng.normal(size=4),
                               log_scale=rng.uniform(-3, 1, 3))
            cov = assemble_covariance(g)
            assert np.array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() > 0

    def test_eigenvalues_equal_squared_scales(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            ls = rng.uniform(-2, 1, 3)
            g = make_primitive(rotation=rng.normal(size=4), log_scale=ls)
            evs = np.sort(np.linalg.eigvalsh(assemble_covariance(g)))
            assert np.allclose(evs, np.sort(np.exp(2 * ls)), rtol=0, atol=1e-9)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        prims = [make_primitive(rotation=rng.normal(size=4),
                                log_scale=rng.uniform(-2, 1, 3)) for _ in range(9)]
        cloud = GaussianCloud.from_primitives(prims)
        batch = assemble_covariances(cloud)
        for i, g in enumerate(prims):
            assert np.allclose(batch[i], assemble_covariance(g), atol=1e-14)


class TestDensity:
    def test_center_is_one(self):
        assert eval_density(make_primitive(), [0, 0, 0]) == 1.0

    def test_unit_isotropic(self):
        val = eval_density(make_primitive(), [1, 0, 0])
        assert val == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            g = make_primitive(rotation=rng.normal(size=4),
                               log_scale=rng.uniform(-1.5, 0.5, 3))
            x = rng.normal(size=3)
            cov = assemble_covariance(g)
            expected = np.exp(-0.5 * x @ np.linalg.inv(cov) @ x)
            assert eval_density(g, x) == pytest.approx(expected, rel=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = rng.normal(size=4)
            g = make_primitive(rotation=q, log_scale=rng.uniform(-1, 0.5, 3))
            x = rng.normal(size=3)
            extra = rng.normal(size=4)
            extra /= np.linalg.norm(extra)
            S = quat_to_rotation_matrix(extra)
            # rotate primitive: R_new = S R  (compose quaternions via matrices)
            R_new = S @ quat_to_rotation_matrix(q)
            g2 = make_primitive(rotation=rotation_matrix_to_quat(R_new),
                                log_scale=g.log_scale)
            assert eval_density(g2, S @ x) == pytest.approx(
                eval_density(g, x), abs=1e-9)


class TestTypes:
    def test_dense_cloud_validates_normals(self):
        with pytest.raises(InvalidInputError):
            DensePointCloud(np.zeros((2, 3)), np.array([[0, 0, 2.0], [0, 0, 1.0]]))

    def test_dense_cloud_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            DensePointCloud(np.zeros((2, 3)), np.array([[0, 0, 1.0]]))

    def test_mesh_rejects_bad_indices(self):
        with pytest.raises(InvalidInputError):
            TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_mesh_rejects_degenerate_faces(self):
        with pytest.raises(InvalidInputError):
            TriangleMesh(np.zeros((3, 3)), [[0, 1, 1]])

    def test_camera_validation(self):
        with pytest.raises(InvalidInputError):
            CameraModel(-1, 1, 5, 5, np.array([1, 0, 0, 0]), np.zeros(3), 10, 10)
        with pytest.raises(InvalidInputError):
            CameraModel(10, 10, 20, 5, np.array([1, 0, 0, 0]), np.zeros(3), 10, 10)

    def test_camera_project_back_project(self):
        rng = np.random.default_rng(8)
        q = rng.normal(size=4)
        cam = CameraModel(85.0, 80.0, 31.5, 23.5, q / np.linalg.norm(q),
                          rng.normal(size=3), 64, 48)
        pts = rng.normal(size=(30, 3)) + np.array([0, 0, 0])
        uv, z = cam.project(pts)
        front = z > 0
        back = cam.back_project(uv[front], z[front])
        assert np.allclose(back, pts[front], atol=1e-9)

    def test_cloud_round_trip_primitives(self):
        rng = np.random.default_rng(9)
        prims = [GaussianPrimitive(rng.normal(size=3), rng.normal(size=4),
                                   rng.normal(size=3), float(rng.normal()),
                                   rng.uniform(0, 1, 3)) for _ in range(5)]
        cloud = GaussianCloud.from_primitives(prims)
        assert len(cloud) == 5
        for i, p in enumerate(cloud.primitives):
            assert np.array_equal(p.position, prims[i].position)
            assert p.opacity_logit == prims[i].opacity_logit

    def test_arrays_read_only(self):
        cloud = GaussianCloud.from_primitives([make_primitive()])
        with pytest.raises(ValueError):
            cloud.positions[0, 0] = 5.0

    def test_sigmoid_logit(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(-800.0) >= 0.0  # no overflow
        from ggs.core import logit
        assert sigmoid(logit(0.1)) == pytest.approx(0.1, rel=1e-12)
