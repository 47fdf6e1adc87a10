import numpy as np
import pytest

from ggs import io
from ggs.core import CameraModel, DensePointCloud, InvalidInputError, TriangleMesh

from helpers import random_gaussian_cloud


def test_point_cloud_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    normals = rng.normal(size=(100, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = DensePointCloud(rng.normal(size=(100, 3)), normals)
    path = tmp_path / "cloud.ply"
    io.write_point_cloud_ply(cloud, path)
    back = io.read_point_cloud_ply(path)
    assert len(back) == 100
    assert np.abs(back.positions - cloud.positions).max() < 1e-6
    assert np.abs(back.normals - cloud.normals).max() < 1e-5


def test_gaussian_ply_round_trip_order_and_values(tmp_path):
    rng = np.random.default_rng(1)
    cloud = random_gaussian_cloud(rng, 64)
    path = tmp_path / "ckpt.ply"
    io.write_gaussian_ply(cloud, path)
    back = io.read_gaussian_ply(path)
    assert len(back) == 64
    # order is stable, values survive float32 storage
    assert np.abs(back.positions - cloud.positions).max() < 1e-6
    assert np.abs(back.rotations - cloud.rotations).max() < 1e-6
    assert np.abs(back.log_scales - cloud.log_scales).max() < 1e-6
    assert np.abs(back.opacity_logits - cloud.opacity_logits).max() < 1e-6
    assert np.abs(back.colors - cloud.colors).max() < 1e-6


def test_gaussian_ply_write_deterministic(tmp_path):
    cloud = random_gaussian_cloud(np.random.default_rng(2), 10)
    p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
    io.write_gaussian_ply(cloud, p1)
    io.write_gaussian_ply(cloud, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_gaussian_ply_header_properties(tmp_path):
    cloud = random_gaussian_cloud(np.random.default_rng(3), 3)
    path = tmp_path / "c.ply"
    io.write_gaussian_ply(cloud, path)
    header = path.read_bytes().split(b"end_header")[0].decode()
    for prop in io.GAUSSIAN_PLY_PROPS:
        assert f"property float {prop}" in header
    assert "binary_little_endian" in header


def test_mesh_obj_round_trip(tmp_path):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.5]], float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = TriangleMesh(verts, faces)
    path = tmp_path / "m.obj"
    io.write_mesh_obj(mesh, path)
    back = io.read_mesh_obj(path)
    assert np.array_equal(back.vertices, verts)  # repr round-trip is exact
    assert np.array_equal(back.faces, faces)


def test_mesh_ply_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    verts = rng.normal(size=(20, 3))
    faces = np.array([[i, (i + 1) % 20, (i + 7) % 20] for i in range(15)])
    mesh = TriangleMesh(verts, faces)
    path = tmp_path / "m.ply"
    io.write_mesh_ply(mesh, path)
    back = io.read_mesh_ply(path)
    assert np.abs(back.vertices - verts).max() < 1e-6
    assert np.array_equal(back.faces, faces)


def test_pfm_round_trip_gray_and_color(tmp_path):
    rng = np.random.default_rng(5)
    gray = rng.uniform(0, 10, (17, 23)).astype(np.float32)
    io.write_pfm(gray, tmp_path / "g.pfm")
    assert np.array_equal(io.read_pfm(tmp_path / "g.pfm"), gray)
    color = rng.uniform(0, 1, (8, 9, 3)).astype(np.float32)
    io.write_pfm(color, tmp_path / "c.pfm")
    assert np.array_equal(io.read_pfm(tmp_path / "c.pfm"), color)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (12, 15, 3))
    io.write_png(img, tmp_path / "i.png")
    back = io.read_png(tmp_path / "i.png")
    assert back.shape == (12, 15, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_cameras_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    cams = {}
    for i in range(4):
        q = rng.normal(size=4)
        cams[i * 3] = CameraModel(100 + i, 90.0, 31.5, 23.5,
                                  q / np.linalg.norm(q), rng.normal(size=3),
                                  64, 48)
    path = tmp_path / "cams.txt"
    io.write_cameras_txt(cams, path)
    back = io.read_cameras_txt(path)
    assert sorted(back) == sorted(cams)
    for vid in cams:
        assert back[vid].fx == cams[vid].fx
        assert np.array_equal(back[vid].rotation, cams[vid].rotation)
        assert np.array_equal(back[vid].translation, cams[vid].translation)


def test_cameras_missing_file():
    with pytest.raises(InvalidInputError):
        io.read_cameras_txt("/nonexistent/cams.txt")


def test_cameras_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 100 100 32 24 1 0 0\n")
    with pytest.raises(InvalidInputError):
        io.read_cameras_txt(path)


def test_read_ply_rejects_garbage(tmp_path):
    path = tmp_path / "g.ply"
    path.write_bytes(b"not a ply\n")
    with pytest.raises(InvalidInputError):
        io.read_ply(path)
