import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regrasp.errors import DimensionMismatch, EmptyCloud, InsufficientTrainingData
from regrasp.geometry import PointCloud, RigidTransform
from regrasp.shape_space import (
    DeformationField,
    LatentDescriptor,
    RegistrationResult,
    ShapeSpaceModel,
    cpd_nonrigid,
    decode,
    default_latent_dim,
    encode,
    inference_energy,
    infer,
    load_model,
    save_model,
    train_shape_space,
    warp_pose,
)
from regrasp.shapes import category_instance, cylinder_mesh

CYL = cylinder_mesh(0.04, 0.12, segments=10, rings=2)


def _cloud(mesh, n=200, seed=0):
    return np.vstack([mesh.vertices, mesh.sample_surface(n, np.random.default_rng(seed)).points])


def _scaled(mesh, s):
    return mesh.with_vertices(mesh.vertices * s)


@pytest.fixture(scope="module")
def spray():
    """Spray bottle shape space with its training fields and meshes."""
    canonical, _, _ = category_instance("spray_bottle")
    rng = np.random.default_rng(5)
    train = [category_instance("spray_bottle", rng)[0] for _ in range(5)]
    model, fields = train_shape_space(canonical, train, return_fields=True)
    return model, fields, train


# CPD ----------------------------------------------------------------------------


def test_cpd_identity():
    p = _cloud(CYL)
    f = cpd_nonrigid(p, p)
    diag = np.linalg.norm(p.max(axis=0) - p.min(axis=0))
    assert np.abs(f.displacements).max() < 1e-3 * diag


def test_cpd_uniform_scale():
    p = _cloud(CYL)
    f = cpd_nonrigid(p, 1.2 * p)
    diag = np.linalg.norm(1.2 * (p.max(axis=0) - p.min(axis=0)))
    err = np.linalg.norm(p + f.displacements - 1.2 * p, axis=1)
    assert err.max() < 0.01 * diag


def test_cpd_different_point_counts():
    f = cpd_nonrigid(_cloud(CYL, 150), _cloud(_scaled(CYL, 1.1), 330, seed=1))
    assert f.canonical_vertex_count == len(_cloud(CYL, 150))
    assert np.all(np.isfinite(f.displacements))


def test_cpd_empty():
    with pytest.raises(EmptyCloud):
        cpd_nonrigid(np.zeros((0, 3)), _cloud(CYL))


# training ----------------------------------------------------------------------


def test_scale_family_is_one_dimensional():
    model = train_shape_space(CYL, [_scaled(CYL, s) for s in (0.9, 1.0, 1.1)], latent_dim=1, n_samples=150)
    ratio = model.metadata["explained_variance_ratio"]
    assert ratio[0] >= 0.99
    assert model.latent_dim == 1


def test_full_rank_reconstructs_training_fields():
    meshes = [_scaled(CYL, 0.9), CYL.with_vertices(CYL.vertices * [1.2, 1.0, 0.8]), _scaled(CYL, 1.1)]
    model, fields = train_shape_space(CYL, meshes, latent_dim=3, n_samples=150, return_fields=True)
    for f in fields:
        z = encode(model, f)
        rec = model.mean_field.flat() + model.basis @ z
        np.testing.assert_allclose(rec, f.flat(), atol=1e-6)
        # decode carries the same field onto the canonical vertices
        np.testing.assert_allclose(decode(model, LatentDescriptor(z)).vertices, CYL.vertices + f.displacements, atol=1e-6)


def test_basis_orthonormal(spray):
    model, _, _ = spray
    np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(model.latent_dim), atol=1e-6)
    assert model.latent_dim <= 5
    assert np.all(model.training_variances >= 0)


def test_one_mesh_is_not_enough():
    with pytest.raises(InsufficientTrainingData):
        train_shape_space(CYL, [CYL])


def test_latent_dim_above_count_rejected():
    with pytest.raises(InsufficientTrainingData):
        train_shape_space(CYL, [CYL, CYL], latent_dim=3)


def test_default_latent_dim():
    assert default_latent_dim([0.9, 0.06, 0.04]) == 2
    assert default_latent_dim([0.96, 0.04]) == 1
    assert default_latent_dim([0.0, 0.0]) == 1


# decode --------------------------------------------------------------------------


def test_decode_zero(spray):
    model, _, _ = spray
    mesh = decode(model, LatentDescriptor(np.zeros(model.latent_dim)))
    np.testing.assert_allclose(mesh.vertices, model.canonical.vertices + model.mean_field.displacements)
    np.testing.assert_array_equal(mesh.faces, model.canonical.faces)


def test_decode_translation(spray):
    model, _, _ = spray
    z = np.linspace(-1, 1, model.latent_dim) * np.sqrt(model.training_variances)
    base = decode(model, LatentDescriptor(z))
    moved = decode(model, LatentDescriptor(z, RigidTransform.from_translation([0.1, -0.2, 0.3])))
    np.testing.assert_allclose(moved.vertices, base.vertices + [0.1, -0.2, 0.3], atol=1e-15)


def test_decode_wrong_dimension(spray):
    model, _, _ = spray
    with pytest.raises(DimensionMismatch):
        decode(model, LatentDescriptor(np.zeros(model.latent_dim + 1)))


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_decode_is_linear(spray, a, b):
    model, _, _ = spray
    sig = np.sqrt(model.training_variances)
    z1 = np.resize(a, model.latent_dim) * sig
    z2 = np.resize(b, model.latent_dim) * sig

    def d(z):
        return decode(model, LatentDescriptor(z)).vertices

    d0 = d(np.zeros(model.latent_dim))
    np.testing.assert_allclose(d(z1 + z2) - d0, (d(z1) - d0) + (d(z2) - d0), atol=1e-12)


# inference -----------------------------------------------------------------------


def test_infer_held_out_instance(spray):
    model, _, _ = spray
    inst, _, _ = category_instance("spray_bottle", np.random.default_rng(123))
    obs = inst.sample_surface(800, np.random.default_rng(0))
    res = infer(model, obs)
    assert res.fitness_rms < 0.02 * inst.diagonal()
    np.testing.assert_array_equal(res.deformed_mesh.faces, model.canonical.faces)


def test_infer_canonical_gives_small_latent():
    # z = 0 decodes to the mean shape, so the training set is built from
    # mirrored pairs of axis scalings whose mean is the canonical itself
    canonical, _, _ = category_instance("spray_bottle")
    train = []
    for a in ([0.12, 0.0, 0.06], [0.0, 0.12, -0.08], [0.1, -0.1, 0.1]):
        for sign in (1, -1):
            train.append(canonical.with_vertices(canonical.vertices * (1 + sign * np.array(a))))
    model, fields = train_shape_space(canonical, train, latent_dim=3, return_fields=True)
    res = infer(model, canonical.sample_surface(800, np.random.default_rng(0)))
    smallest = min(np.linalg.norm(encode(model, f)) for f in fields)
    assert np.linalg.norm(res.latent.z) < 0.1 * smallest
    dt, ang = res.latent.local_rigid.distance_to(RigidTransform.identity())
    assert dt < 2e-3 and ang < math.radians(1)


def test_infer_recovers_small_rotation(spray):
    model, _, train = spray
    rot = RigidTransform.from_axis_angle([0.4, 0.3, 0.86], math.radians(5))
    obs = PointCloud(rot.apply(train[1].sample_surface(800, np.random.default_rng(0)).points))
    res = infer(model, obs)
    _, ang = res.latent.local_rigid.distance_to(rot)
    assert ang < math.radians(1)


def test_infer_init_pose_is_object_frame(spray):
    model, _, train = spray
    pose = RigidTransform.from_axis_angle([0, 0, 1], 1.0, [0.5, 0.2, 0.1])
    local = train[0].sample_surface(600, np.random.default_rng(0)).points
    a = infer(model, PointCloud(local))
    b = infer(model, PointCloud(pose.apply(local)), init_pose=pose)
    np.testing.assert_allclose(a.latent.z, b.latent.z, atol=1e-6 * np.abs(a.latent.z).max() + 1e-9)


def test_infer_cost_never_increases(spray):
    model, _, train = spray
    obs = PointCloud(RigidTransform.from_axis_angle([1, 0, 0], 0.1, [0.01, 0, 0]).apply(train[2].sample_surface(500, np.random.default_rng(1)).points))
    res = infer(model, obs)
    assert len(res.costs) >= 2
    assert np.all(np.diff(res.costs) <= 1e-9 * res.costs[0])


def test_infer_empty(spray):
    with pytest.raises(EmptyCloud):
        infer(spray[0], PointCloud(np.zeros((0, 3))))


@pytest.mark.parametrize("seed", range(4))
def test_energy_gradient_matches_finite_differences(spray, seed):
    model, _, _ = spray
    rng = np.random.default_rng(seed)
    n = 30
    face = rng.integers(0, len(model.canonical.faces), n)
    bary = rng.dirichlet([1, 1, 1], n)
    pts = rng.normal(scale=0.05, size=(n, 3)) + [0, 0, 0.1]
    lr = RigidTransform.from_rotvec(rng.normal(scale=0.2, size=3), rng.normal(scale=0.01, size=3))
    z = rng.normal(size=model.latent_dim) * model.sigma
    _, grad = inference_energy(model, pts, face, bary, z, lr)
    num = np.empty_like(z)
    for k in range(len(z)):
        h = 1e-4 * model.sigma[k]
        e = np.zeros_like(z)
        e[k] = h
        num[k] = (inference_energy(model, pts, face, bary, z + e, lr)[0] - inference_energy(model, pts, face, bary, z - e, lr)[0]) / (2 * h)
    assert np.linalg.norm(grad - num) <= 1e-4 * np.linalg.norm(num)


# pose warping ----------------------------------------------------------------------


def _field_model(disp):
    nv = len(CYL.vertices)
    basis = np.zeros((3 * nv, 1))
    basis[0, 0] = 1.0
    return ShapeSpaceModel(CYL, DeformationField(disp), basis, np.array([1.0]))


POSE = RigidTransform.from_rotvec([0.3, -0.2, 1.1], [0.03, 0.01, 0.08])


def test_warp_zero_field():
    model = _field_model(np.zeros_like(CYL.vertices))
    out = warp_pose(model, LatentDescriptor(np.zeros(1)), POSE)
    assert out.almost_equal(POSE, 1e-12, 1e-9)


def test_warp_uniform_translation():
    t = np.array([0.01, -0.02, 0.005])
    model = _field_model(np.tile(t, (len(CYL.vertices), 1)))
    out = warp_pose(model, LatentDescriptor(np.zeros(1)), POSE)
    np.testing.assert_allclose(out.translation, POSE.translation + t, atol=1e-9)
    assert out.distance_to(POSE)[1] < 1e-6


def test_warp_uniform_scale():
    s = 1.3
    model = _field_model((s - 1.0) * CYL.vertices)
    out = warp_pose(model, LatentDescriptor(np.zeros(1)), POSE)
    np.testing.assert_allclose(out.translation, s * POSE.translation, atol=1e-9)
    assert out.distance_to(POSE)[1] < 1e-6


def test_warp_composes_local_rigid():
    model = _field_model(np.zeros_like(CYL.vertices))
    lr = RigidTransform.from_axis_angle([0, 1, 0], 0.4, [0.1, 0.0, 0.0])
    reg = RegistrationResult(LatentDescriptor(np.zeros(1), lr), CYL, 0.0)
    assert warp_pose(model, reg, POSE).almost_equal(lr @ POSE, 1e-12, 1e-9)


@given(st.integers(0, 10_000))
def test_warped_orientation_is_rotation(seed):
    rng = np.random.default_rng(seed)
    disp = rng.normal(scale=0.02, size=CYL.vertices.shape)
    out = warp_pose(_field_model(disp), LatentDescriptor(np.zeros(1)), POSE)
    r = out.rotation
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-6)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-6)


# persistence -----------------------------------------------------------------------


def test_save_load_round_trip(tmp_path, spray):
    model, _, _ = spray
    model.metadata["category"] = "spray_bottle"
    save_model(tmp_path / "m.bin", model)
    back = load_model(tmp_path / "m.bin")
    np.testing.assert_array_equal(back.basis, model.basis)
    np.testing.assert_array_equal(back.canonical.vertices, model.canonical.vertices)
    np.testing.assert_array_equal(back.canonical.faces, model.canonical.faces)
    np.testing.assert_array_equal(back.mean_field.displacements, model.mean_field.displacements)
    np.testing.assert_array_equal(back.training_variances, model.training_variances)
    assert back.metadata["category"] == "spray_bottle"


def test_load_rejects_other_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" + bytes(40))
    with pytest.raises(ValueError):
        load_model(tmp_path / "x.bin")


def test_model_shape_checks():
    with pytest.raises(DimensionMismatch):
        ShapeSpaceModel(CYL, DeformationField(np.zeros_like(CYL.vertices)), np.zeros((5, 1)), np.ones(1))
