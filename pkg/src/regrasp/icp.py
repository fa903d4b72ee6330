"""Rigid point-to-mesh ICP, hand cuboid filtering and in-hand grasp correction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, EmptyInput, NoCorrespondences, RefinementRejected
from .geometry import MeshProximity, PointCloud, RigidTransform, TriangleMesh

__all__ = ["IcpParams", "IcpResult", "Cuboid", "InHandResult", "icp_register", "cuboid_filter", "inhand_refine"]


@dataclass
class IcpParams:
    max_iterations: int = 60
    convergence_eps: float = 1e-6
    max_correspondence_dist: float = 0.05
    point_to_plane: bool = True
    # Levenberg damping of the point-to-plane step, relative to the mean
    # curvature; keeps weakly observed directions (symmetries) near the start
    damping: float = 0.0


@dataclass(frozen=True)
class IcpResult:
    """``correction @ init`` maps observed points into the reference frame."""

    correction: RigidTransform
    residual_rms: float
    iterations: int
    converged: bool
    init: RigidTransform = RigidTransform()
    inliers: int = 0

    @property
    def transform(self):
        return self.correction @ self.init


@dataclass(frozen=True)
class Cuboid:
    pose: RigidTransform
    half_extents: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError("cuboid half extents must be positive")
        object.__setattr__(self, "half_extents", h)

    def contains(self, points):
        local = self.pose.inverse().apply(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.half_extents, axis=1)


def cuboid_filter(cloud: PointCloud, cuboid: Cuboid) -> PointCloud:
    """Drop the points inside ``cuboid``; keep everything else in order."""
    if len(cloud) == 0:
        return cloud
    return cloud.subset(~cuboid.contains(cloud.points))


def _solve_point_to_plane(x, q, n, damping=0.0):
    c = x.mean(axis=0)
    xc = x - c
    jac = np.hstack([np.cross(xc, n), n])
    r = np.einsum("ij,ij->i", x - q, n)
    a = jac.T @ jac
    a += (1e-12 + damping / 6.0) * np.trace(a) * np.eye(6)
    delta = -np.linalg.solve(a, jac.T @ r)
    rot = RigidTransform.from_rotvec(delta[:3])
    # rotate about the centroid, then translate
    return RigidTransform.from_translation(c + delta[3:]) @ rot @ RigidTransform.from_translation(-c)


def _solve_point_to_point(x, q):
    cx, cq = x.mean(axis=0), q.mean(axis=0)
    h = (x - cx).T @ (q - cq)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform.from_rotation(r, cq - r @ cx)


def icp_register(
    observed: PointCloud,
    reference: TriangleMesh | MeshProximity,
    init: RigidTransform | None = None,
    params: IcpParams | None = None,
) -> IcpResult:
    """Align ``observed`` to the surface of ``reference``.

    Starts from ``init`` (observed frame to reference frame) and returns the
    extra correction found by alternating exact closest-surface-point
    correspondences with a linearized point-to-plane (or Kabsch) update.
    """
    params = params or IcpParams()
    init = init or RigidTransform.identity()
    if len(observed) == 0:
        raise EmptyCloud("observed cloud is empty")
    try:
        prox = reference if isinstance(reference, MeshProximity) else MeshProximity(reference)
    except EmptyInput as exc:
        raise EmptyInput("reference mesh is empty") from exc

    src = init.apply(observed.points)
    corr = RigidTransform.identity()
    prev_rms = np.inf
    converged = False
    it = 0
    rms = np.inf
    inliers = 0
    for it in range(1, params.max_iterations + 1):
        x = corr.apply(src)
        q, d, face, _ = prox.query(x)
        mask = d <= params.max_correspondence_dist
        inliers = int(mask.sum())
        if inliers == 0:
            raise NoCorrespondences("no observed point within the correspondence distance")
        rms = float(np.sqrt(np.mean(d[mask] ** 2)))
        if prev_rms - rms < params.convergence_eps:
            converged = True
            break
        prev_rms = rms
        if params.point_to_plane and inliers >= 6:
            step = _solve_point_to_plane(x[mask], q[mask], prox.face_normals(face[mask]), params.damping)
        else:
            step = _solve_point_to_point(x[mask], q[mask])
        corr = step @ corr
    else:
        x = corr.apply(src)
        _, d, _, _ = prox.query(x)
        mask = d <= params.max_correspondence_dist
        inliers = int(mask.sum())
        if inliers == 0:
            raise NoCorrespondences("no observed point within the correspondence distance")
        rms = float(np.sqrt(np.mean(d[mask] ** 2)))
        converged = prev_rms - rms < params.convergence_eps
    return IcpResult(corr, rms, it, converged, init, inliers)


@dataclass(frozen=True)
class InHandResult:
    t_view: RigidTransform
    refined_grasp: RigidTransform
    icp: IcpResult
    observed_points: int


def inhand_refine(
    expected_object_pose: RigidTransform,
    observed: PointCloud,
    deformed_mesh: TriangleMesh,
    hand_cuboid,
    functional_grasp: RigidTransform,
    grasp_in_object: RigidTransform | None = None,
    params: IcpParams | None = None,
    residual_gate: float = 0.008,
) -> InHandResult:
    """Correct the functional grasp for object motion inside the first hand.

    ``expected_object_pose`` and ``observed`` share the world frame at
    observation time. The grasp expressed in the object frame defaults to
    ``expected_object_pose^-1 @ functional_grasp``; pass ``grasp_in_object``
    when ``functional_grasp`` lives at a different (handover) placement.
    The returned grasp is ``functional_grasp @ t_view`` where ``t_view`` is
    the measured object displacement expressed in the grasp frame.
    ``hand_cuboid`` is one :class:`Cuboid` or a sequence of them.
    """
    cloud = observed
    for cub in [hand_cuboid] if isinstance(hand_cuboid, Cuboid) else hand_cuboid:
        cloud = cuboid_filter(cloud, cub)
    if len(cloud) == 0:
        raise NoCorrespondences("every observed point lies inside the hand cuboid")
    res = icp_register(cloud, deformed_mesh, expected_object_pose.inverse(), params)
    if res.residual_rms > residual_gate:
        raise RefinementRejected(f"ICP residual {res.residual_rms * 1000:.2f} mm above gate {residual_gate * 1000:.1f} mm")
    g = grasp_in_object if grasp_in_object is not None else expected_object_pose.inverse() @ functional_grasp
    # object moved by correction^-1 in its own frame
    t_view = g.inverse() @ res.correction.inverse() @ g
    return InHandResult(t_view, functional_grasp @ t_view, res, len(cloud))
