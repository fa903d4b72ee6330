"""Antipodal parallel-jaw grasp sampling on a depth image and greedy selection.

Grasps are parallel to the image plane and approach along the camera's
optical axis. The quality is an antipodality surrogate: the mean alignment of
the two contact normals (from depth gradients) with the closing axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform
from .render import DepthImage, PinholeCamera, SegmentationMask

__all__ = [
    "GripperParams",
    "GraspHypothesis",
    "GraspCandidateSet",
    "sample_antipodal",
    "select_candidates",
    "flip_grasp",
    "save_grasps",
    "load_grasps",
]


@dataclass
class GripperParams:
    max_width: float = 0.085  # meters
    friction_mu: float = 0.5
    edge_threshold: float = 0.005  # depth change per pixel that marks an edge, meters
    grasp_depth: float = 0.01  # center sits this far past the contacts along the approach


@dataclass(frozen=True, eq=False)
class GraspHypothesis:
    center: np.ndarray  # world, meters
    axis: np.ndarray  # closing direction, unit
    approach: np.ndarray  # unit
    width: float
    quality: float

    def __post_init__(self):
        for k in ("center", "axis", "approach"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=np.float64).reshape(3))
        if abs(float(self.axis @ self.approach)) > 1e-6:
            raise ValueError("grasp axis must be perpendicular to the approach")
        if not self.width > 0:
            raise ValueError("grasp width must be positive")

    def pose(self) -> RigidTransform:
        """Tool frame: +z approach, +y closing axis, origin at the center."""
        x = np.cross(self.axis, self.approach)
        return RigidTransform.from_rotation(np.column_stack([x, self.axis, self.approach]), self.center)

    def to_dict(self):
        return dict(
            center=self.center.tolist(),
            axis=self.axis.tolist(),
            approach=self.approach.tolist(),
            width=float(self.width),
            quality=float(self.quality),
        )

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["axis"], d["approach"], d["width"], d["quality"])


@dataclass(frozen=True)
class GraspCandidateSet:
    grasps: tuple  # doubled: each selected grasp followed by its flipped twin
    selected: tuple = field(default=())  # before doubling, descending quality

    def __len__(self):
        return len(self.grasps)

    def __iter__(self):
        return iter(self.grasps)

    def __getitem__(self, i):
        return self.grasps[i]


def flip_grasp(g: GraspHypothesis) -> GraspHypothesis:
    """Same grasp with the finger assignment swapped: half turn about the approach."""
    return GraspHypothesis(g.center.copy(), -g.axis, g.approach.copy(), g.width, g.quality)


def _edge_normals(d, mask, threshold):
    fill = d[mask].max() + 10.0 * threshold
    z = np.where(mask, d, fill)
    gr, gc = np.gradient(z)
    mag = np.hypot(gr, gc)
    edge = mask & (mag > threshold)
    safe = np.where(mag > 0, mag, 1.0)
    # outward normal in (col, row) image coordinates
    return edge, gc / safe, gr / safe


def sample_antipodal(
    depth: DepthImage,
    mask: SegmentationMask,
    camera: PinholeCamera,
    camera_pose: RigidTransform,
    gripper: GripperParams | None = None,
    n_samples: int = 500,
    seed: int = 0,
):
    """Antipodal grasp hypotheses from a depth image and object mask.

    Up to ``n_samples`` edge pixels are drawn with ``seed``. From each one a
    ray is marched against its outward normal until it leaves the mask; the
    last pixel inside is the opposing contact. A pair is kept when both
    outward normals lie within the friction cone of the closing axis and the
    deprojected contact distance fits the gripper.
    """
    gripper = gripper or GripperParams()
    if gripper.friction_mu <= 0:
        raise ValueError("friction coefficient must be positive")
    d = depth.depth if isinstance(depth, DepthImage) else np.asarray(depth)
    m = (mask.mask if isinstance(mask, SegmentationMask) else np.asarray(mask, dtype=bool)) & (d > 0)
    if not m.any():
        return []
    edge, nu, nv = _edge_normals(d, m, gripper.edge_threshold)
    rows, cols = np.nonzero(edge)
    if len(rows) == 0:
        return []
    rng = np.random.default_rng(seed)
    if len(rows) > n_samples:
        pick = np.sort(rng.choice(len(rows), size=n_samples, replace=False))
        rows, cols = rows[pick], cols[pick]
    du, dv = -nu[rows, cols], -nv[rows, cols]
    zmin = d[m].min()
    max_steps = int(math.ceil(gripper.max_width * max(camera.fx, camera.fy) / zmin)) + 2

    h, w = m.shape
    cur_r, cur_c = rows.copy(), cols.copy()
    alive = np.ones(len(rows), dtype=bool)
    for s in range(1, max_steps + 1):
        rr = np.rint(rows + s * dv).astype(np.int64)
        cc = np.rint(cols + s * du).astype(np.int64)
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        inside[inside] = m[rr[inside], cc[inside]]
        step = alive & inside
        cur_r[step], cur_c[step] = rr[step], cc[step]
        alive &= inside
        if not alive.any():
            break
    # rays still inside after max_steps span more than the gripper opening
    ok = ~alive & ((cur_r != rows) | (cur_c != cols)) & edge[cur_r, cur_c]

    cos_cone = math.cos(math.atan(gripper.friction_mu))
    cam_z = camera_pose.rotation[:, 2]
    out = []
    for i in np.nonzero(ok)[0]:
        r1, c1, r2, c2 = rows[i], cols[i], cur_r[i], cur_c[i]
        a2 = np.array([c2 - c1, r2 - r1], dtype=np.float64)
        a2 /= np.linalg.norm(a2)
        n1 = np.array([nu[r1, c1], nv[r1, c1]])
        n2 = np.array([nu[r2, c2], nv[r2, c2]])
        # contact 1 pushes along +a, so its outward normal points along -a
        if -n1 @ a2 < cos_cone or n2 @ a2 < cos_cone:
            continue
        # contacts sit on the mask boundary, half a pixel past the edge pixel centers
        p1 = _deproject_px(camera, camera_pose, r1 - 0.5 * a2[1], c1 - 0.5 * a2[0], d[r1, c1])
        p2 = _deproject_px(camera, camera_pose, r2 + 0.5 * a2[1], c2 + 0.5 * a2[0], d[r2, c2])
        width = float(np.linalg.norm(p2 - p1))
        if not 0 < width <= gripper.max_width:
            continue
        axis = p2 - p1
        axis -= (axis @ cam_z) * cam_z
        na = np.linalg.norm(axis)
        if na == 0:
            continue
        axis /= na
        center = 0.5 * (p1 + p2) + gripper.grasp_depth * cam_z
        quality = 0.5 * (abs(n1 @ a2) + abs(n2 @ a2))
        out.append(GraspHypothesis(center, axis, cam_z.copy(), width, float(quality)))
    return out


def _deproject_px(camera, camera_pose, r, c, z):
    p = np.array([(c - camera.cx) / camera.fx * z, (r - camera.cy) / camera.fy * z, z])
    return camera_pose.apply(p)


def _horizontal_gap(a: GraspHypothesis, b: GraspHypothesis):
    d = a.center - b.center
    d = d - (d @ a.approach) * a.approach
    return float(np.linalg.norm(d))


def select_candidates(hypotheses, min_separation=0.01, quality_floor=0.5, min_count=10) -> GraspCandidateSet:
    """Greedy best-first selection with a horizontal separation constraint.

    After each accepted grasp the selection stops if its quality is below
    ``quality_floor`` and ``min_count`` grasps have been taken. Every selected
    grasp is then paired with its flipped twin.
    """
    order = sorted(range(len(hypotheses)), key=lambda i: (-hypotheses[i].quality, i))
    chosen = []
    for i in order:
        h = hypotheses[i]
        if any(_horizontal_gap(h, c) < min_separation for c in chosen):
            continue
        chosen.append(h)
        if h.quality < quality_floor and len(chosen) >= min_count:
            break
    doubled = []
    for g in chosen:
        doubled += [g, flip_grasp(g)]
    return GraspCandidateSet(tuple(doubled), tuple(chosen))


def save_grasps(path, grasps):
    items = grasps.grasps if isinstance(grasps, GraspCandidateSet) else grasps
    Path(path).write_text(json.dumps({"frame": "world", "units": "m", "grasps": [g.to_dict() for g in items]}, indent=2))


def load_grasps(path):
    data = json.loads(Path(path).read_text())
    return [GraspHypothesis.from_dict(g) for g in data["grasps"]]
