"""Z-buffer depth rendering of triangle meshes through a pinhole camera.

Camera frame: +x right, +y down, +z along the optical axis. Pixel ``(row,
col)`` is centered at image coordinates ``(u, v) = (col, row)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import PointCloud, RigidTransform, TriangleMesh

__all__ = [
    "PinholeCamera",
    "DepthImage",
    "SegmentationMask",
    "render_depth",
    "render_labels",
    "top_down_camera",
    "look_at",
    "deproject",
]

NEAR = 1e-3


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 550.0
    fy: float = 550.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points_cam):
        p = np.atleast_2d(points_cam)
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy], axis=1)

    def ray(self, u, v):
        """Unnormalized viewing ray with unit z component."""
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def to_dict(self):
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


@dataclass(frozen=True, eq=False)
class DepthImage:
    depth: np.ndarray  # (height, width) meters along the optical axis, 0 = no hit

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    mask: np.ndarray  # (height, width) bool, True = object

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]


@njit(cache=True)
def _raster(tri_cam, labels, fx, fy, cx, cy, width, height, zbuf, ids):
    for t in range(tri_cam.shape[0]):
        x0, y0, z0 = tri_cam[t, 0, 0], tri_cam[t, 0, 1], tri_cam[t, 0, 2]
        x1, y1, z1 = tri_cam[t, 1, 0], tri_cam[t, 1, 1], tri_cam[t, 1, 2]
        x2, y2, z2 = tri_cam[t, 2, 0], tri_cam[t, 2, 1], tri_cam[t, 2, 2]
        u0, v0 = fx * x0 / z0 + cx, fy * y0 / z0 + cy
        u1, v1 = fx * x1 / z1 + cx, fy * y1 / z1 + cy
        u2, v2 = fx * x2 / z2 + cx, fy * y2 / z2 + cy
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        cmin = max(int(math.ceil(min(u0, min(u1, u2)))), 0)
        cmax = min(int(math.floor(max(u0, max(u1, u2)))), width - 1)
        rmin = max(int(math.ceil(min(v0, min(v1, v2)))), 0)
        rmax = min(int(math.floor(max(v0, max(v1, v2)))), height - 1)
        if cmin > cmax or rmin > rmax:
            continue
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        inv_area = 1.0 / area
        for r in range(rmin, rmax + 1):
            for c in range(cmin, cmax + 1):
                w0 = ((u1 - c) * (v2 - r) - (u2 - c) * (v1 - r)) * inv_area
                w1 = ((u2 - c) * (v0 - r) - (u0 - c) * (v2 - r)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # 1/z is affine in screen space for planar triangles
                z = 1.0 / (w0 * iz0 + w1 * iz1 + w2 * iz2)
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    ids[r, c] = labels[t]


def _clip_near(tri, labels):
    """Clip triangles against the plane z = NEAR; returns triangles fully in front."""
    z = tri[:, :, 2]
    front = np.all(z >= NEAR, axis=1)
    crossing = ~front & np.any(z >= NEAR, axis=1)
    out_t, out_l = [tri[front]], [labels[front]]
    for t, lab in zip(tri[crossing], labels[crossing]):
        poly = []
        for i in range(3):
            a, b = t[i], t[(i + 1) % 3]
            ina, inb = a[2] >= NEAR, b[2] >= NEAR
            if ina:
                poly.append(a)
            if ina != inb:
                s = (NEAR - a[2]) / (b[2] - a[2])
                poly.append(a + s * (b - a))
        for k in range(1, len(poly) - 1):
            out_t.append(np.array([[poly[0], poly[k], poly[k + 1]]]))
            out_l.append(np.array([lab]))
    return np.concatenate(out_t).reshape(-1, 3, 3), np.concatenate(out_l).astype(np.int64)


def render_labels(meshes, camera: PinholeCamera, camera_pose: RigidTransform):
    """Render several meshes; returns ``(depth, ids)`` where ids is -1 off-mesh."""
    if isinstance(meshes, TriangleMesh):
        meshes = [meshes]
    world_to_cam = camera_pose.inverse()
    tris, labels = [], []
    for i, m in enumerate(meshes):
        if m.is_empty:
            continue
        tris.append(world_to_cam.apply(m.vertices)[m.faces])
        labels.append(np.full(len(m.faces), i, dtype=np.int64))
    zbuf = np.full((camera.height, camera.width), np.inf)
    ids = np.full((camera.height, camera.width), -1, dtype=np.int64)
    if tris:
        tri, lab = _clip_near(np.concatenate(tris), np.concatenate(labels))
        if len(tri):
            _raster(np.ascontiguousarray(tri), lab, camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height, zbuf, ids)
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return depth, ids


def render_depth(mesh: TriangleMesh, camera: PinholeCamera, camera_pose: RigidTransform):
    """Depth image and object mask of ``mesh`` (no back-face culling)."""
    depth, ids = render_labels([mesh], camera, camera_pose)
    return DepthImage(depth), SegmentationMask(ids >= 0)


def look_at(eye, target, x_hint=(1.0, 0.0, 0.0)):
    """Camera pose at ``eye`` whose optical axis points at ``target``.

    The image x-axis is the component of ``x_hint`` orthogonal to the axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.asarray(x_hint, dtype=np.float64)
    x = x - (x @ z) * z
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("x_hint parallel to the optical axis")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform.from_rotation(np.column_stack([x, y, z]), eye)


def top_down_camera(mesh: TriangleMesh, object_pose: RigidTransform, standoff: float | None = None) -> RigidTransform:
    """Virtual camera straight above the posed mesh's bounding-box center.

    Optical axis is world -z and the image x-axis is world +x. The default
    standoff is twice the mesh bounding-box diagonal.
    """
    if standoff is None:
        standoff = 2.0 * mesh.diagonal()
    if standoff <= 0:
        raise ValueError("standoff must be positive")
    v = object_pose.apply(mesh.vertices)
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return RigidTransform.from_rotation(rot, center + np.array([0.0, 0.0, standoff]))


def deproject(depth, camera: PinholeCamera, camera_pose: RigidTransform, mask=None) -> PointCloud:
    """World-frame points of the pixels with positive depth (and ``mask``)."""
    d = depth.depth if isinstance(depth, DepthImage) else np.asarray(depth)
    sel = d > 0
    if mask is not None:
        sel &= mask.mask if isinstance(mask, SegmentationMask) else np.asarray(mask, dtype=bool)
    r, c = np.nonzero(sel)
    z = d[r, c]
    pts = np.stack([(c - camera.cx) / camera.fx * z, (r - camera.cy) / camera.fy * z, z], axis=1)
    return PointCloud(camera_pose.apply(pts))
