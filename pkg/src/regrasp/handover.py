"""Handover planning: supportive-grasp filtering and the sampled search for the
cheapest feasible pair of end-effector poses.

The supportive grasp ``q`` and the functional grasp ``f`` are moved together
as a rigid pair; each sampled transform is checked for IK on both arms and for
collisions, and scored by the joint-limit proximity cost of both arms.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.transform import Rotation
from scipy.stats import qmc

from .collision import CollisionWorld, SphereSet, check_free
from .errors import Infeasible, NoHandoverFound
from .geometry import RigidTransform, bounding_sphere
from .kinematics import DEFAULT_EPSILON, DualArmModel, IkParams, KinematicChain, ik, proximity_cost

__all__ = [
    "TransformSample",
    "SamplingParams",
    "CostParams",
    "HandoverConfiguration",
    "HandoverContext",
    "PlannerStats",
    "evaluate_candidate",
    "handover_motion",
    "arm_spheres",
    "robot_static_spheres",
    "held_object_spheres",
    "object_sphere_cover",
    "pregrasp",
    "filter_grasps",
    "sample_transforms",
    "apply_handover_transform",
    "plan_handover",
    "brute_force_handover",
]

C_MIN_INIT = 1.0
C_STOP = 0.1


# robot geometry -----------------------------------------------------------------


def arm_spheres(chain: KinematicChain, theta, prefix: str) -> SphereSet:
    """Spheres of one arm at ``theta``; consecutive sphere-carrying links are exempt."""
    centers, radii, links = chain.sphere_positions(theta)
    ids = [f"{prefix}{int(k)}" for k in links]
    order = sorted(set(int(k) for k in links))
    exc = {(f"{prefix}{a}", f"{prefix}{b}") for a, b in zip(order, order[1:])}
    return SphereSet(centers, radii, ids, exc)


def robot_static_spheres(model: DualArmModel) -> SphereSet:
    if not model.torso_spheres:
        return SphereSet.empty()
    c = np.array([s[0] for s in model.torso_spheres])
    r = np.array([s[1] for s in model.torso_spheres])
    return SphereSet(c, r, ["torso"] * len(r))


def _hand_links(chain: KinematicChain, prefix):
    links = sorted(set(s.link for s in chain.spheres))
    return [f"{prefix}{k}" for k in links[-2:]]


def held_object_spheres(tip_pose: RigidTransform, center_in_tip, radius, hand_ids=()) -> SphereSet:
    """Spheres covering a held object, attached to a hand's tip frame.

    ``center_in_tip`` is one center or ``(k, 3)`` centers, ``radius`` a scalar
    or ``k`` radii. The spheres are exempt from checks against the links in
    ``hand_ids`` (the hands touching the object).
    """
    c = tip_pose.apply(np.asarray(center_in_tip, dtype=np.float64).reshape(-1, 3))
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(c),))
    return SphereSet(c, r, ["object"] * len(c), {("object", h) for h in hand_ids})


def object_sphere_cover(points, k=8, seed=0):
    """``(centers, radii)`` of ``k`` spheres that jointly contain ``points``.

    Points are split by k-means; each cluster gets the smallest sphere about
    its mean that holds all its members. ``k=1`` falls back to the minimal
    bounding sphere.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot cover an empty point set")
    if k <= 1 or len(pts) <= k:
        c, r = bounding_sphere(pts)
        return np.asarray(c).reshape(1, 3), np.array([max(float(r), 1e-9)])
    centers, labels = kmeans2(pts, k, minit="++", seed=seed)
    out_c, out_r = [], []
    for j in range(k):
        members = pts[labels == j]
        if len(members) == 0:
            continue
        c = members.mean(axis=0)
        out_c.append(c)
        out_r.append(max(float(np.linalg.norm(members - c, axis=1).max()), 1e-9))
    return np.array(out_c), np.array(out_r)


# grasp filtering ------------------------------------------------------------------


def pregrasp(grasp: RigidTransform, offset: float = 0.10) -> RigidTransform:
    """Pose ``offset`` meters back along the grasp's approach (+z) axis."""
    return grasp @ RigidTransform.from_translation([0.0, 0.0, -offset])


def _as_pose(g):
    return g if isinstance(g, RigidTransform) else g.pose()


def _arm_free(world, chain, theta, prefix, extra=()):
    dyn = SphereSet.merge([arm_spheres(chain, theta, prefix), *extra])
    return check_free(world, dyn)


def filter_grasps(
    candidates,
    model: DualArmModel,
    world: CollisionWorld,
    side: str = "left",
    pregrasp_offset: float = 0.10,
    ik_params: IkParams | None = None,
):
    """Keep grasps whose pose and pregrasp both have IK solutions that are collision free.

    Returns ``(kept_indices, states)``: the indices into ``candidates`` that
    survive and the arm's joint state at each kept grasp.
    """
    chain = model.arm(side)
    prefix = side[0].upper()
    kept, states = [], []
    for i, g in enumerate(candidates):
        pose = _as_pose(g)
        try:
            th = ik(chain, pose, params=ik_params)
            th_pre = ik(chain, pregrasp(pose, pregrasp_offset), seed_state=th, params=ik_params)
        except Infeasible:
            continue
        if not _arm_free(world, chain, th, prefix)[0] or not _arm_free(world, chain, th_pre, prefix)[0]:
            continue
        kept.append(i)
        states.append(th)
    return kept, states


# transform sampling -----------------------------------------------------------------


@dataclass(frozen=True)
class TransformSample:
    translation: np.ndarray  # world frame, meters
    rotation: np.ndarray  # extrinsic x, y, z angles about world axes, radians

    def rotation_matrix(self):
        return Rotation.from_euler("xyz", self.rotation).as_matrix()

    def is_identity(self):
        return not np.any(self.translation) and not np.any(self.rotation)


@dataclass
class SamplingParams:
    n: int = 256
    translation_bounds: tuple = ((-0.25, 0.25),) * 3
    rotation_bounds: tuple = ((-math.pi / 4, math.pi / 4),) * 3
    seed: int = 0


def sample_transforms(params: SamplingParams | None = None):
    """``n`` transforms from a scrambled Halton sequence; sample 0 is the identity."""
    params = params or SamplingParams()
    if params.n < 1:
        return []
    bounds = np.array(list(params.translation_bounds) + list(params.rotation_bounds), dtype=np.float64)
    if bounds.shape != (6, 2) or np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError("bounds must be six (low, high) intervals")
    out = [TransformSample(np.zeros(3), np.zeros(3))]
    if params.n > 1:
        u = qmc.Halton(d=6, scramble=True, seed=params.seed).random(params.n - 1)
        x = bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])
        out += [TransformSample(r[:3].copy(), r[3:].copy()) for r in x]
    return out


def apply_handover_transform(pair, t: TransformSample):
    """Move the pose pair rigidly: rotate about its midpoint (world axes), then translate."""
    move = handover_motion(pair, t)
    return move @ pair[0], move @ pair[1]


def handover_motion(pair, t: TransformSample) -> RigidTransform:
    """The world transform that :func:`apply_handover_transform` applies to both poses."""
    q, f = pair
    mid = 0.5 * (q.translation + f.translation)
    rot = RigidTransform.from_rotation(t.rotation_matrix())
    return RigidTransform.from_translation(mid + t.translation) @ rot @ RigidTransform.from_translation(-mid)


# planning ---------------------------------------------------------------------------


@dataclass
class CostParams:
    epsilon: float = DEFAULT_EPSILON
    # extra (weight, fn(HandoverConfiguration) -> float) terms added to the proximity cost
    extra_terms: tuple = ()


@dataclass(frozen=True)
class HandoverConfiguration:
    supportive: RigidTransform
    functional: RigidTransform
    joint_states: dict
    cost: float
    grasp_index: int = -1
    sample_index: int = -1
    motion: RigidTransform = RigidTransform()


@dataclass
class PlannerStats:
    evaluated: int = 0
    feasible: int = 0
    ik_rejected: int = 0
    collision_rejected: int = 0
    early_stop: bool = False
    best_cost: float | None = None
    wall_time: float = 0.0

    def to_dict(self):
        return dict(
            evaluated=self.evaluated,
            feasible=self.feasible,
            ik_rejected=self.ik_rejected,
            collision_rejected=self.collision_rejected,
            early_stop=self.early_stop,
            best_cost=self.best_cost,
            wall_time=self.wall_time,
        )


@dataclass
class HandoverContext:
    """Everything besides the poses that one candidate evaluation needs."""

    model: DualArmModel
    world: CollisionWorld
    supportive_side: str = "left"
    # spheres covering the object at the grasp-time placement, world; one
    # center or (k, 3) centers with matching radii
    object_center: np.ndarray | None = None
    object_radius: float | np.ndarray = 0.0
    ik_params: IkParams = field(default_factory=IkParams)
    cost: CostParams = field(default_factory=CostParams)

    @property
    def functional_side(self):
        return "right" if self.supportive_side == "left" else "left"


def evaluate_candidate(ctx: HandoverContext, q: RigidTransform, f: RigidTransform, grasp: RigidTransform | None = None):
    """``(status, states, cost)``, status one of ``ok``, ``ik``, ``collision``.

    ``grasp`` is the supportive grasp at the placement where
    ``ctx.object_center`` was measured; it fixes where the held object's
    bounding sphere sits relative to the supportive hand.
    """
    cs, cf = ctx.model.arm(ctx.supportive_side), ctx.model.arm(ctx.functional_side)
    ps, pf = ctx.supportive_side[0].upper(), ctx.functional_side[0].upper()
    try:
        ths = ik(cs, q, params=ctx.ik_params)
        thf = ik(cf, f, params=ctx.ik_params)
    except Infeasible:
        return "ik", None, None
    sets = [arm_spheres(cs, ths, ps), arm_spheres(cf, thf, pf)]
    if ctx.object_center is not None and np.all(np.asarray(ctx.object_radius) > 0):
        hands = _hand_links(cs, ps) + _hand_links(cf, pf)
        tip = RigidTransform.from_matrix(cs.fk_matrix(ths))
        in_tip = (grasp if grasp is not None else q).inverse().apply(np.asarray(ctx.object_center, dtype=np.float64).reshape(-1, 3))
        sets.append(held_object_spheres(tip, in_tip, ctx.object_radius, hands))
    free, _ = check_free(ctx.world, SphereSet.merge(sets))
    if not free:
        return "collision", None, None
    states = {ctx.supportive_side: ths, ctx.functional_side: thf}
    cost = proximity_cost([ths, thf], [cs, cf], ctx.cost.epsilon)
    if ctx.cost.extra_terms:
        cfg = HandoverConfiguration(q, f, states, cost)
        cost += sum(w * fn(cfg) for w, fn in ctx.cost.extra_terms)
    return "ok", states, cost


def plan_handover(
    feasible,
    functional: RigidTransform,
    ctx: HandoverContext,
    samples=None,
    early_stop: bool = True,
    c_stop: float = C_STOP,
    stats: PlannerStats | None = None,
) -> HandoverConfiguration:
    """Search grasps x transform samples for the cheapest feasible handover.

    ``feasible`` holds supportive grasp poses (world frame, same object
    placement as ``functional``). The minimum starts at 1; after a grasp's
    samples are exhausted the search ends if it fell below ``c_stop``. Ties
    keep the earliest grasp, then the earliest sample.
    """
    stats = stats if stats is not None else PlannerStats()
    t0 = time.perf_counter()
    samples = sample_transforms() if samples is None else samples
    best = None
    c_min = C_MIN_INIT
    for gi, g in enumerate(feasible):
        q = _as_pose(g)
        for si, t in enumerate(samples):
            qt, ft = apply_handover_transform((q, functional), t)
            stats.evaluated += 1
            status, states, cost = evaluate_candidate(ctx, qt, ft, q)
            if status == "ik":
                stats.ik_rejected += 1
                continue
            if status == "collision":
                stats.collision_rejected += 1
                continue
            stats.feasible += 1
            if best is None or cost < best.cost:
                best = HandoverConfiguration(qt, ft, states, cost, gi, si, handover_motion((q, functional), t))
                c_min = min(c_min, cost)
        if early_stop and c_min < c_stop:
            stats.early_stop = True
            break
    stats.wall_time = time.perf_counter() - t0
    if best is None:
        raise NoHandoverFound(f"no feasible handover among {stats.evaluated} candidates")
    stats.best_cost = best.cost
    return best


def brute_force_handover(feasible, functional, ctx: HandoverContext, samples):
    """Every feasible ``(cost, grasp_index, sample_index)``, for checking the planner."""
    out = []
    for gi, g in enumerate(feasible):
        for si, t in enumerate(samples):
            qt, ft = apply_handover_transform((_as_pose(g), functional), t)
            status, _, cost = evaluate_candidate(ctx, qt, ft, _as_pose(g))
            if status == "ok":
                out.append((cost, gi, si))
    return out
