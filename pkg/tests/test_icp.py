import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regrasp.errors import EmptyCloud, NoCorrespondences, RefinementRejected
from regrasp.geometry import MeshProximity, PointCloud, RigidTransform
from regrasp.icp import Cuboid, IcpParams, cuboid_filter, icp_register, inhand_refine
from regrasp.shapes import spray_bottle, spray_bottle_grasp

MESH = spray_bottle()
PROX = MeshProximity(MESH)
GRASP = spray_bottle_grasp()


def _samples(n=800, seed=0):
    return MESH.sample_surface(n, np.random.default_rng(seed))


# icp_register ----------------------------------------------------------------------


def test_ground_truth_init_gives_identity():
    res = icp_register(_samples(), PROX)
    dt, ang = res.correction.distance_to(RigidTransform.identity())
    assert dt < 1e-9 and ang < 1e-9
    assert res.residual_rms < 1e-6
    assert res.converged


def test_recovers_known_perturbation():
    t = RigidTransform.from_axis_angle([0.3, -0.5, 0.8], math.radians(10), [0.03, 0.0, 0.0])
    obs = PointCloud(t.apply(_samples().points))
    res = icp_register(obs, PROX)
    dt, ang = res.correction.distance_to(t.inverse())
    assert dt < 1e-3 and ang < math.radians(0.5)


def test_recovers_perturbation_with_noise():
    rng = np.random.default_rng(1)
    t = RigidTransform.from_axis_angle([0.3, -0.5, 0.8], math.radians(10), [0.03, 0.0, 0.0])
    pts = _samples(1500).points + rng.normal(scale=0.002, size=(1500, 3))
    res = icp_register(PointCloud(t.apply(pts)), PROX)
    dt, ang = res.correction.distance_to(t.inverse())
    assert dt < 5e-3 and ang < math.radians(2)


def test_point_to_point_variant():
    t = RigidTransform.from_axis_angle([0, 0, 1], math.radians(5), [0.01, 0.0, 0.0])
    obs = PointCloud(t.apply(_samples().points))
    res = icp_register(obs, PROX, params=IcpParams(point_to_plane=False, max_iterations=200, convergence_eps=1e-9))
    dt, ang = res.correction.distance_to(t.inverse())
    assert dt < 2e-3 and ang < math.radians(1)


def test_init_is_composed():
    t = RigidTransform.from_axis_angle([1, 0, 0], 0.2, [0.1, 0.2, 0.3])
    obs = PointCloud(t.apply(_samples().points))
    res = icp_register(obs, PROX, init=t.inverse())
    assert res.transform.almost_equal(t.inverse(), 1e-6, 1e-6)
    assert res.correction.angle < 1e-6


def test_iterations_bounded():
    t = RigidTransform.from_axis_angle([0, 1, 0], 0.3, [0.04, 0.0, 0.0])
    res = icp_register(PointCloud(t.apply(_samples().points)), PROX, params=IcpParams(max_iterations=3))
    assert res.iterations <= 3
    assert res.residual_rms >= 0


def test_empty_cloud():
    with pytest.raises(EmptyCloud):
        icp_register(PointCloud(np.zeros((0, 3))), PROX)


def test_far_cloud_has_no_correspondences():
    obs = PointCloud(_samples().points + [5.0, 0.0, 0.0])
    with pytest.raises(NoCorrespondences):
        icp_register(obs, PROX)


def test_idempotent_when_reseeded():
    t = RigidTransform.from_axis_angle([0.2, 0.9, 0.1], math.radians(8), [0.02, -0.01, 0.0])
    obs = PointCloud(t.apply(_samples().points))
    params = IcpParams(convergence_eps=1e-9)
    first = icp_register(obs, PROX, params=params)
    second = icp_register(obs, PROX, init=first.transform, params=params)
    dt, ang = second.correction.distance_to(RigidTransform.identity())
    assert dt < 1e-5 and ang < 1e-4


def test_deterministic():
    t = RigidTransform.from_axis_angle([0, 0, 1], 0.1, [0.01, 0.0, 0.0])
    obs = PointCloud(t.apply(_samples().points))
    a = icp_register(obs, PROX)
    b = icp_register(obs, PROX)
    np.testing.assert_array_equal(a.correction.matrix, b.correction.matrix)


# cuboid filter ---------------------------------------------------------------------


CUB = Cuboid(RigidTransform.from_axis_angle([0, 0, 1], 0.4, [0.1, 0.0, 0.0]), [0.05, 0.02, 0.03])


def test_all_outside_unchanged():
    pts = np.random.default_rng(0).uniform(1.0, 2.0, size=(30, 3))
    out = cuboid_filter(PointCloud(pts), CUB)
    np.testing.assert_array_equal(out.points, pts)


def test_all_inside_empty():
    local = np.random.default_rng(0).uniform(-1, 1, size=(30, 3)) * CUB.half_extents * 0.99
    out = cuboid_filter(PointCloud(CUB.pose.apply(local)), CUB)
    assert len(out) == 0


def test_mixed_matches_brute_force():
    pts = np.random.default_rng(2).uniform(-0.1, 0.2, size=(2000, 3))
    out = cuboid_filter(PointCloud(pts), CUB)
    m = CUB.pose.matrix
    keep = []
    for p in pts:
        local = m[:3, :3].T @ (p - m[:3, 3])
        keep.append(any(abs(local[i]) > CUB.half_extents[i] for i in range(3)))
    np.testing.assert_array_equal(out.points, pts[np.array(keep)])


def test_invalid_cuboid():
    with pytest.raises(ValueError):
        Cuboid(RigidTransform.identity(), [0.1, 0.0, 0.1])


@given(st.integers(0, 10_000))
def test_filter_partitions_input(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.1, 0.2, size=(200, 3))
    inside = CUB.contains(pts)
    out = cuboid_filter(PointCloud(pts), CUB)
    assert len(out) + inside.sum() == len(pts)
    np.testing.assert_array_equal(out.points, pts[~inside])


# in-hand refinement ----------------------------------------------------------------


EXPECTED = RigidTransform.from_axis_angle([0, 1, 0], 0.3, [0.6, 0.1, 0.4])
FUNCTIONAL = EXPECTED @ GRASP
# a small box far from the object, so the filter removes nothing important
FAR_CUBOID = Cuboid(RigidTransform.from_translation([3.0, 0.0, 0.0]), [0.01, 0.01, 0.01])


def test_no_motion_keeps_grasp():
    obs = PointCloud(EXPECTED.apply(_samples().points))
    out = inhand_refine(EXPECTED, obs, MESH, FAR_CUBOID, FUNCTIONAL)
    dt, ang = out.t_view.distance_to(RigidTransform.identity())
    assert dt < 1e-6 and ang < 1e-6
    assert out.refined_grasp.almost_equal(FUNCTIONAL, 1e-6, 1e-6)


def test_five_degree_rotation_about_grasp_axis():
    rot = RigidTransform.from_axis_angle([0, 0, 1], math.radians(5))
    true_pose = FUNCTIONAL @ rot @ GRASP.inverse()
    obs = PointCloud(true_pose.apply(_samples(1500).points))
    out = inhand_refine(EXPECTED, obs, MESH, FAR_CUBOID, FUNCTIONAL)
    _, ang = out.refined_grasp.distance_to(FUNCTIONAL)
    assert ang == pytest.approx(math.radians(5), abs=math.radians(0.5))
    dt, ang_truth = out.refined_grasp.distance_to(FUNCTIONAL @ rot)
    assert ang_truth < math.radians(0.5) and dt < 1e-3


def test_refined_grasp_is_functional_times_t_view():
    t = RigidTransform.from_axis_angle([1, 1, 0], math.radians(4), [0.005, 0.0, 0.0])
    obs = PointCloud((EXPECTED @ t).apply(_samples().points))
    out = inhand_refine(EXPECTED, obs, MESH, FAR_CUBOID, FUNCTIONAL)
    np.testing.assert_allclose(out.refined_grasp.matrix, (FUNCTIONAL @ out.t_view).matrix, atol=1e-12)


def test_hand_cuboid_list_filters_all():
    obs = PointCloud(EXPECTED.apply(_samples().points))
    tip = Cuboid(FUNCTIONAL, [0.03, 0.03, 0.03])
    out = inhand_refine(EXPECTED, obs, MESH, [tip, FAR_CUBOID], FUNCTIONAL)
    assert out.observed_points == len(cuboid_filter(obs, tip))


def test_cloud_inside_cuboid_raises():
    obs = PointCloud(EXPECTED.apply(_samples().points))
    big = Cuboid(EXPECTED, [1.0, 1.0, 1.0])
    with pytest.raises(NoCorrespondences):
        inhand_refine(EXPECTED, obs, MESH, big, FUNCTIONAL)


def test_residual_gate():
    rng = np.random.default_rng(0)
    pts = EXPECTED.apply(_samples().points) + rng.normal(scale=0.02, size=(800, 3))
    with pytest.raises(RefinementRejected):
        inhand_refine(EXPECTED, PointCloud(pts), MESH, FAR_CUBOID, FUNCTIONAL)
