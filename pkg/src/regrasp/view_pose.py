"""Observation pose: present the held object to the sensor for in-hand refinement.

The functional grasp frame is placed on the camera's optical axis at
``d_min + offset_D`` with its approach direction along the camera z-axis. The
supportive hand, which holds the object, follows rigidly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.stats import qmc

from .collision import CollisionWorld, SphereSet, check_free
from .errors import Infeasible, NoViewPoseFound
from .geometry import RigidTransform, rotvec_to_matrix
from .handover import arm_spheres, held_object_spheres
from .kinematics import IkParams, KinematicChain, ik

__all__ = ["ViewPoseRequest", "ViewSampling", "ViewPoseResult", "canonical_view_pose", "pose_metric", "generate_view_pose", "perturbed_poses"]


@dataclass(frozen=True)
class ViewPoseRequest:
    functional_grasp: RigidTransform  # f*, world
    grasp_approach: np.ndarray  # pregrasp -> grasp direction, world, unit
    camera_pose: RigidTransform
    d_min: float = 0.5
    offset_D: float = 0.1
    # f*^-1 q*: the supportive hand pose seen from the functional grasp frame
    supportive_in_functional: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")
        if self.offset_D < 0:
            raise ValueError("offset_D must be non-negative")
        a = np.asarray(self.grasp_approach, dtype=np.float64).reshape(3)
        object.__setattr__(self, "grasp_approach", a / np.linalg.norm(a))


@dataclass
class ViewSampling:
    n: int = 128
    translation: float = 0.10  # +- meters per axis
    rotation: float = math.radians(20.0)  # +- radians per world axis
    seed: int = 0
    angle_weight: float = 0.2  # meters per radian in the pose metric


@dataclass(frozen=True)
class ViewPoseResult:
    functional_pose: RigidTransform  # f_o
    supportive_pose: RigidTransform
    joint_state: np.ndarray
    canonical: bool
    metric: float = 0.0  # distance to the canonical pose
    evaluated: int = 1


def pose_metric(a: RigidTransform, b: RigidTransform, angle_weight=0.2):
    dt, ang = a.distance_to(b)
    return dt + angle_weight * ang


def _align(a, b):
    """A rotation taking unit vector ``a`` onto unit vector ``b``."""
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return rotvec_to_matrix(math.pi * perp / np.linalg.norm(perp))
    return rotvec_to_matrix(v / s * math.atan2(s, c))


def canonical_view_pose(req: ViewPoseRequest, roll_steps: int = 360) -> RigidTransform:
    """``f_o`` on the optical axis; the free roll about it keeps the supportive
    hand's orientation closest to its current one."""
    cam_r = req.camera_pose.rotation
    zc = cam_r[:, 2]
    center = req.camera_pose.translation + (req.d_min + req.offset_D) * zc
    rf = req.functional_grasp.rotation
    # turn the whole grasp frame so its approach runs along the camera z-axis
    r0 = _align(req.grasp_approach, zc) @ rf
    rel = req.supportive_in_functional.rotation
    current_q = rf @ rel
    best, best_r = np.inf, r0
    for k in range(roll_steps):
        rr = rotvec_to_matrix(zc * (2.0 * math.pi * k / roll_steps)) @ r0
        # angle between new and current supportive orientation
        m = (rr @ rel).T @ current_q
        ang = math.acos(min(1.0, max(-1.0, (np.trace(m) - 1.0) / 2.0)))
        if ang < best - 1e-12:
            best, best_r = ang, rr
    return RigidTransform.from_rotation(best_r, center)


def _feasible(f_pose, req, chain, world, prefix, held, ik_params, seed_state):
    s_pose = f_pose @ req.supportive_in_functional
    try:
        th = ik(chain, s_pose, seed_state=seed_state, params=ik_params)
    except Infeasible:
        return None
    sets = [arm_spheres(chain, th, prefix)]
    if held is not None:
        center_in_tip, radius, hand_ids = held
        tip = RigidTransform.from_matrix(chain.fk_matrix(th))
        sets.append(held_object_spheres(tip, center_in_tip, radius, hand_ids))
    free, _ = check_free(world, SphereSet.merge(sets))
    return (s_pose, th) if free else None


def generate_view_pose(
    req: ViewPoseRequest,
    chain: KinematicChain,
    world: CollisionWorld,
    sampler: ViewSampling | None = None,
    held_object=None,
    ik_params: IkParams | None = None,
    prefix: str | None = None,
    seed_state=None,
) -> ViewPoseResult:
    """Observation pose for the supportive arm ``chain``.

    Tries the canonical pose first. Otherwise draws ``sampler.n`` Halton
    perturbations around it (translation in world axes, rotation about world
    axes through the pose origin) and returns the feasible one closest to the
    canonical pose under ``dt + angle_weight * angle``, ties to the lowest
    sample index. ``held_object`` is ``(center_in_tip, radius, hand_ids)``.
    """
    sampler = sampler or ViewSampling()
    prefix = prefix or (chain.name[:1].upper() if chain.name else "S")
    canon = canonical_view_pose(req)
    hit = _feasible(canon, req, chain, world, prefix, held_object, ik_params, seed_state)
    if hit is not None:
        return ViewPoseResult(canon, hit[0], hit[1], True, 0.0, 1)
    cands = perturbed_poses(canon, sampler)
    metrics = np.array([pose_metric(c, canon, sampler.angle_weight) for c in cands])
    order = np.argsort(metrics, kind="stable")
    for n_eval, i in enumerate(order, start=2):
        hit = _feasible(cands[i], req, chain, world, prefix, held_object, ik_params, seed_state)
        if hit is not None:
            return ViewPoseResult(cands[i], hit[0], hit[1], False, float(metrics[i]), n_eval)
    raise NoViewPoseFound(f"canonical view pose and {len(cands)} perturbations are all infeasible")


def perturbed_poses(canon: RigidTransform, sampler: ViewSampling):
    if sampler.n < 1:
        return []
    u = qmc.Halton(d=6, scramble=True, seed=sampler.seed).random(sampler.n)
    x = 2.0 * u - 1.0
    out = []
    for row in x:
        rot = Rotation.from_euler("xyz", row[3:] * sampler.rotation).as_matrix()
        out.append(RigidTransform.from_rotation(rot @ canon.rotation, canon.translation + row[:3] * sampler.translation))
    return out
