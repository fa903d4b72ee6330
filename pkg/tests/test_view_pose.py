import math

import numpy as np
import pytest

from regrasp.collision import CollisionWorld, SphereSet, build_edt, check_free
from regrasp.errors import Infeasible, NoViewPoseFound
from regrasp.geometry import RigidTransform
from regrasp.handover import arm_spheres
from regrasp.kinematics import Joint, KinematicChain, fk, ik
from regrasp.view_pose import (
    ViewPoseRequest,
    ViewSampling,
    canonical_view_pose,
    generate_view_pose,
    perturbed_poses,
    pose_metric,
)
from regrasp.shapes import _tool_pose

FUNCTIONAL = _tool_pose([0.5, -0.05, 0.2], [1, 0, 0], [0, 1, 0])
APPROACH = np.array([1.0, 0.0, 0.0])


@pytest.fixture(scope="module")
def empty_world():
    return CollisionWorld(build_edt(np.zeros((4, 4, 4), dtype=bool), origin=(3.0, 3.0, 3.0), resolution=0.1))


def _request(robot, **kw):
    return ViewPoseRequest(FUNCTIONAL, APPROACH, robot.camera_pose, **kw)


def test_default_distances():
    req = ViewPoseRequest(FUNCTIONAL, APPROACH, RigidTransform.identity())
    assert req.d_min == 0.5 and req.offset_D == 0.1


def test_request_validation():
    with pytest.raises(ValueError):
        ViewPoseRequest(FUNCTIONAL, APPROACH, RigidTransform.identity(), d_min=0.0)
    with pytest.raises(ValueError):
        ViewPoseRequest(FUNCTIONAL, APPROACH, RigidTransform.identity(), offset_D=-0.1)


def test_canonical_pose_geometry(robot, empty_world):
    req = _request(robot)
    res = generate_view_pose(req, robot.left, empty_world)
    assert res.canonical
    cam = robot.camera_pose
    assert np.linalg.norm(res.functional_pose.translation - cam.translation) == pytest.approx(0.6, abs=1e-9)
    # the pose sits on the optical axis
    local = cam.inverse().apply(res.functional_pose.translation)
    np.testing.assert_allclose(local[:2], 0.0, atol=1e-9)
    # approach, carried rigidly with the grasp frame, runs along camera z
    approach_local = FUNCTIONAL.rotation.T @ APPROACH
    np.testing.assert_allclose(res.functional_pose.rotation @ approach_local, cam.rotation[:, 2], atol=1e-6)


def test_canonical_pose_custom_distances(robot):
    req = _request(robot, d_min=0.3, offset_D=0.05)
    pose = canonical_view_pose(req)
    assert np.linalg.norm(pose.translation - robot.camera_pose.translation) == pytest.approx(0.35, abs=1e-12)


def test_returned_pose_is_feasible(robot, empty_world):
    res = generate_view_pose(_request(robot), robot.left, empty_world)
    dt, ang = fk(robot.left, res.joint_state).distance_to(res.supportive_pose)
    assert dt < 1e-3 and ang < math.radians(0.5)
    assert check_free(empty_world, arm_spheres(robot.left, res.joint_state, "L"))[0]


def _oracle_feasible(pose, req, chain, world):
    try:
        th = ik(chain, pose @ req.supportive_in_functional)
    except Infeasible:
        return False
    return check_free(world, arm_spheres(chain, th, "L"))[0]


def test_blocked_canonical_falls_back_to_nearest_feasible(robot, empty_world):
    req = _request(robot)
    canon = canonical_view_pose(req)
    blocker = SphereSet([canon.translation], [0.06], ["obstacle"])
    world = CollisionWorld(empty_world.static, blocker)
    sampler = ViewSampling(n=64)
    res = generate_view_pose(req, robot.left, world, sampler)
    assert not res.canonical
    assert not res.functional_pose.almost_equal(canon, 1e-6, 1e-6)
    assert _oracle_feasible(res.functional_pose, req, robot.left, world)
    # brute force over the sample set: nothing strictly closer is feasible
    for p in perturbed_poses(canon, sampler):
        if pose_metric(p, canon) < res.metric - 1e-12:
            assert not _oracle_feasible(p, req, robot.left, world)


def test_short_arm_has_no_view_pose(empty_world, robot):
    tiny = KinematicChain(
        [Joint(RigidTransform.identity(), [0, 0, 1], -1.0, 1.0)],
        base_pose=RigidTransform.from_translation([-2.0, 0.0, 0.0]),
        tip_offset=RigidTransform.from_translation([0.1, 0.0, 0.0]),
        name="left",
    )
    with pytest.raises(NoViewPoseFound):
        generate_view_pose(_request(robot), tiny, empty_world, ViewSampling(n=16))


def test_perturbations_within_bounds():
    canon = RigidTransform.from_axis_angle([0, 1, 0], 0.3, [0.3, 0.1, 0.4])
    s = ViewSampling(n=50, translation=0.1, rotation=math.radians(20))
    for p in perturbed_poses(canon, s):
        assert np.all(np.abs(p.translation - canon.translation) <= 0.1 + 1e-12)
        # xyz euler angles each within 20 degrees bound the total angle
        assert (p @ canon.inverse()).angle <= math.sqrt(3) * math.radians(20) + 1e-9
    a = [p.matrix for p in perturbed_poses(canon, s)]
    b = [p.matrix for p in perturbed_poses(canon, s)]
    np.testing.assert_array_equal(a, b)


def test_pose_metric():
    a = RigidTransform.identity()
    b = RigidTransform.from_axis_angle([1, 0, 0], 0.5, [0.3, 0.0, 0.4])
    assert pose_metric(a, b) == pytest.approx(0.5 + 0.2 * 0.5)
