import warnings

import numpy as np
import pytest

from regrasp.geometry import PointCloud, TriangleMesh
from regrasp.io import (
    read_cloud,
    read_mesh,
    read_pfm,
    read_png16_mm,
    write_cloud,
    write_mask_png,
    write_mesh,
    write_pfm,
    write_png16_mm,
)
from regrasp.shapes import box_mesh, cylinder_mesh


@pytest.mark.parametrize("name,binary", [("m.obj", True), ("m.ply", True), ("m.ply", False)])
def test_mesh_round_trip(tmp_path, name, binary):
    mesh = cylinder_mesh(0.03, 0.1, segments=12)
    write_mesh(tmp_path / name, mesh, binary=binary)
    back = read_mesh(tmp_path / name)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    # obj text keeps 17 significant digits, ply stores doubles
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=0, atol=1e-15)


@pytest.mark.parametrize("binary", [True, False])
def test_cloud_round_trip_with_normals(tmp_path, binary):
    cloud = box_mesh((0.1, 0.1, 0.1)).sample_surface(100, np.random.default_rng(0))
    write_cloud(tmp_path / "c.ply", cloud, binary=binary)
    back = read_cloud(tmp_path / "c.ply")
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-15)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-12)


def test_degenerate_faces_dropped(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
    (tmp_path / "d.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\nf 1 1 3\n")
    mesh, dropped = read_mesh(tmp_path / "d.obj", return_dropped=True)
    assert dropped == 2
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2]])
    np.testing.assert_array_equal(mesh.vertices, v)


def test_obj_polygons_and_slashes(tmp_path):
    (tmp_path / "q.obj").write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n")
    mesh = read_mesh(tmp_path / "q.obj")
    assert len(mesh.faces) == 2
    assert mesh.face_areas().sum() == pytest.approx(1.0)


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        read_mesh(tmp_path / "x.stl")


def test_pfm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0.3, 2.0, size=(7, 11)).astype(np.float32)
    img[0, 0] = 0.0
    write_pfm(tmp_path / "d.pfm", img)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), img.astype(np.float64))


def test_png16_round_trip_millimeters(tmp_path):
    img = np.random.default_rng(0).uniform(0.3, 2.0, size=(5, 9))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        write_png16_mm(tmp_path / "d.png", img)
        write_mask_png(tmp_path / "m.png", img > 1.0)
    back = read_png16_mm(tmp_path / "d.png")
    assert np.abs(back - img).max() <= 0.0005 + 1e-12


def test_cloud_without_normals(tmp_path):
    cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    write_cloud(tmp_path / "c.ply", cloud)
    back = read_cloud(tmp_path / "c.ply")
    assert back.normals is None
    np.testing.assert_array_equal(back.points, cloud.points)


def test_empty_mesh_round_trip(tmp_path):
    mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    write_mesh(tmp_path / "e.ply", mesh)
    assert read_mesh(tmp_path / "e.ply").is_empty
