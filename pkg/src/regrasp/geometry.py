"""Rigid transforms, point clouds, triangle meshes and mesh preprocessing.

Quaternions are stored scalar-last ``(x, y, z, w)``, matching
:mod:`scipy.spatial.transform`. All lengths are meters.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyInput

__all__ = [
    "RigidTransform",
    "PointCloud",
    "TriangleMesh",
    "MeshProximity",
    "transform_points",
    "subdivide_mesh",
    "cluster_decimate",
    "bounding_sphere",
    "closest_points_on_triangles",
    "skew",
    "rotvec_to_matrix",
    "matrix_to_rotvec",
]


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rv):
    rv = np.asarray(rv, dtype=np.float64)
    theta = math.sqrt(float(rv @ rv))
    if theta < 1e-12:
        return np.eye(3) + skew(rv)
    k = skew(rv / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def matrix_to_rotvec(m):
    return _quat_to_rotvec(_matrix_to_quat(m))


def _quat_to_rotvec(q):
    q = q if q[3] >= 0 else -q
    s = math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2)
    if s < 1e-12:
        return 2.0 * q[:3]
    angle = 2.0 * math.atan2(s, q[3])
    return q[:3] / s * angle


def _matrix_to_quat(m):
    # Shepperd's method; picks the numerically largest pivot
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    diag = (tr, m[0, 0], m[1, 1], m[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = math.sqrt(1.0 + tr) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif k == 1:
        s = math.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0)) * 2.0
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif k == 2:
        s = math.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 0.0)) * 2.0
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = math.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 0.0)) * 2.0
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def _quat_to_matrix(q):
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element ``x -> R x + t``.

    Composition follows the matrix convention: ``(a @ b).apply(p) ==
    a.apply(b.apply(p))``.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12 or not np.all(np.isfinite(t)):
            raise ValueError("invalid rigid transform")
        q = q / n
        if q[3] < 0:
            q = -q
        object.__setattr__(self, "quat", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))

    # constructors ---------------------------------------------------------
    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (4, 4):
            return cls(_matrix_to_quat(m[:3, :3]), m[:3, 3])
        if m.shape == (3, 3):
            return cls(_matrix_to_quat(m), np.zeros(3))
        raise DimensionMismatch(f"expected 3x3 or 4x4 matrix, got {m.shape}")

    @classmethod
    def from_rotation(cls, rotation, translation=(0.0, 0.0, 0.0)):
        return cls(_matrix_to_quat(rotation), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        rv = np.asarray(rotvec, dtype=np.float64)
        angle = float(np.linalg.norm(rv))
        if angle < 1e-15:
            return cls(np.array([0.0, 0.0, 0.0, 1.0]), translation)
        axis = rv / angle
        q = np.concatenate([axis * math.sin(angle / 2), [math.cos(angle / 2)]])
        return cls(q, translation)

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=np.float64)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle, translation)

    @classmethod
    def from_translation(cls, translation):
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), translation)

    @classmethod
    def random(cls, rng, max_angle, max_translation):
        """Random axis with angle <= max_angle, translation inside a ball."""
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, max_angle)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        t = d * max_translation * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
        return cls.from_axis_angle(axis, angle, t)

    # accessors ------------------------------------------------------------
    @property
    def rotation(self):
        return _quat_to_matrix(self.quat)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def rotvec(self):
        return _quat_to_rotvec(np.asarray(self.quat))

    @property
    def angle(self):
        """Rotation angle in radians, in [0, pi]."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.quat[:3])), abs(float(self.quat[3])))

    # algebra --------------------------------------------------------------
    def __matmul__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        q = _quat_mul(self.quat, other.quat)
        t = self.rotation @ other.translation + self.translation
        return RigidTransform(q, t)

    def compose(self, other):
        return self @ other

    def inverse(self):
        qi = np.array([-self.quat[0], -self.quat[1], -self.quat[2], self.quat[3]])
        return RigidTransform(qi, -(_quat_to_matrix(qi) @ self.translation))

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def distance_to(self, other):
        """``(translation distance, rotation angle)`` between two poses."""
        dt = float(np.linalg.norm(self.translation - other.translation))
        return dt, (self.inverse() @ other).angle

    def almost_equal(self, other, atol=1e-9, angle_tol=1e-9):
        dt, da = self.distance_to(other)
        return dt <= atol and da <= angle_tol

    def to_dict(self):
        return {"quat_xyzw": self.quat.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        if "matrix" in d:
            return cls.from_matrix(d["matrix"])
        if "rotvec" in d:
            return cls.from_rotvec(d["rotvec"], d.get("translation", (0, 0, 0)))
        return cls(d.get("quat_xyzw", (0, 0, 0, 1)), d.get("translation", (0, 0, 0)))

    def __repr__(self):
        q = np.round(self.quat, 6).tolist()
        t = np.round(self.translation, 6).tolist()
        return f"RigidTransform(quat={q}, translation={t})"


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _frozen(p))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise DimensionMismatch("normals must match points")
            if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(n))

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        n = None if self.normals is None else self.normals[mask]
        return PointCloud(self.points[mask], n)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f, np.int64))

    @property
    def is_empty(self):
        return len(self.faces) == 0 or len(self.vertices) == 0

    def triangles(self):
        return self.vertices[self.faces]

    def face_normals(self):
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def face_areas(self):
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self):
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def center(self):
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def transformed(self, t: RigidTransform):
        return TriangleMesh(t.apply(self.vertices), self.faces)

    def with_vertices(self, vertices):
        return TriangleMesh(vertices, self.faces)

    def sample_surface(self, n, rng):
        """Area-weighted uniform surface samples with face normals."""
        areas = self.face_areas()
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.uniform(size=n))
        r2 = rng.uniform(size=n)
        tri = self.triangles()[idx]
        pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
        return PointCloud(pts, self.face_normals()[idx])

    @staticmethod
    def concatenate(meshes):
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        return TriangleMesh(np.vstack(verts), np.vstack(faces))


def transform_points(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else t.apply_vectors(cloud.normals)
    return PointCloud(t.apply(cloud.points), normals)


def subdivide_mesh(mesh: TriangleMesh, levels: int = 2) -> TriangleMesh:
    """Linear 1-to-4 subdivision through edge midpoints, ``levels`` times."""
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if mesh.is_empty:
        return mesh
    verts, faces = np.array(mesh.vertices), np.array(mesh.faces)
    for _ in range(levels):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
        nf = len(faces)
        m01 = inv[:nf] + len(verts)
        m12 = inv[nf : 2 * nf] + len(verts)
        m20 = inv[2 * nf :] + len(verts)
        a, b, c = faces.T
        faces = np.concatenate(
            [
                np.stack([a, m01, m20], axis=1),
                np.stack([m01, b, m12], axis=1),
                np.stack([m20, m12, c], axis=1),
                np.stack([m01, m12, m20], axis=1),
            ]
        )
        verts = np.vstack([verts, mids])
    return TriangleMesh(verts, faces)


def cluster_decimate(mesh: TriangleMesh, cell_size: float, use_quadrics: bool = False) -> TriangleMesh:
    """Vertex clustering on an axis-aligned grid anchored at the mesh minimum.

    Each occupied cell keeps one vertex: the centroid of its members, or with
    ``use_quadrics`` the minimizer of the summed face-plane quadrics (falls
    back to the centroid when the quadric is rank deficient). Faces that
    collapse or duplicate another face are dropped.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(mesh.vertices) == 0:
        return mesh
    v = mesh.vertices
    cells = np.floor((v - v.min(axis=0)) / cell_size).astype(np.int64)
    _, first, inv = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    # renumber clusters by first occurrence so untouched meshes keep their order
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    label = rank[inv]
    k = len(first)
    counts = np.bincount(label, minlength=k).astype(np.float64)
    reps = np.zeros((k, 3))
    np.add.at(reps, label, v)
    reps /= counts[:, None]

    if use_quadrics and len(mesh.faces):
        n = mesh.face_normals()
        d = -np.einsum("ij,ij->i", n, v[mesh.faces[:, 0]])
        plane = np.concatenate([n, d[:, None]], axis=1)
        q_face = plane[:, :, None] * plane[:, None, :]
        q = np.zeros((k, 4, 4))
        for corner in range(3):
            np.add.at(q, label[mesh.faces[:, corner]], q_face)
        for i in range(k):
            a = q[i, :3, :3]
            if np.linalg.cond(a) < 1e8:
                x = np.linalg.solve(a, -q[i, :3, 3])
                # keep the solution inside the cell's neighbourhood
                if np.linalg.norm(x - reps[i]) <= cell_size:
                    reps[i] = x

    f = label[mesh.faces] if len(mesh.faces) else np.zeros((0, 3), np.int64)
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[keep]
    if len(f):
        _, uidx = np.unique(np.sort(f, axis=1), axis=0, return_index=True)
        f = f[np.sort(uidx)]
    return TriangleMesh(reps, f)


# bounding sphere ------------------------------------------------------------


def _sphere2(a, b):
    c = 0.5 * (a + b)
    return c, float(np.linalg.norm(a - c))


def _sphere3(a, b, c):
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = float(n @ n)
    if nn < 1e-24:
        return _widest(a, b, c)
    o = (np.cross(n, ab) * float(ac @ ac) + np.cross(ac, n) * float(ab @ ab)) / (2.0 * nn)
    return a + o, float(np.linalg.norm(o))


def _sphere4(a, b, c, d):
    m = np.array([b - a, c - a, d - a])
    det = np.linalg.det(m)
    if abs(det) < 1e-18:
        return _widest(a, b, c, d)
    rhs = 0.5 * np.array([m[0] @ m[0], m[1] @ m[1], m[2] @ m[2]])
    o = np.linalg.solve(m, rhs)
    return a + o, float(np.linalg.norm(o))


def _widest(*pts):
    # degenerate support set: smallest of the spheres spanned by sub-pairs/triples that contain all
    best = None
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            c, r = _sphere2(pts[i], pts[j])
            if all(np.linalg.norm(p - c) <= r * (1 + 1e-9) + 1e-12 for p in pts):
                if best is None or r < best[1]:
                    best = (c, r)
    if best is None:
        c = np.mean(pts, axis=0)
        best = (c, max(float(np.linalg.norm(p - c)) for p in pts))
    return best


def bounding_sphere(points, seed: int = 0):
    """Minimal enclosing sphere (Welzl's move-to-front iteration).

    Returns the exact minimum up to floating point, so the radius is within
    a factor 1 + 1e-9 of optimal. Raises :class:`EmptyInput` on no points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("bounding_sphere of an empty point set")
    pts = np.unique(pts, axis=0)
    order = list(range(len(pts)))
    random.Random(seed).shuffle(order)
    p = pts[order]
    eps = 1e-10

    def outside(q, c, r):
        return float(np.linalg.norm(q - c)) > r * (1 + 1e-12) + eps

    c, r = p[0].copy(), 0.0
    for i in range(1, len(p)):
        if not outside(p[i], c, r):
            continue
        c, r = p[i].copy(), 0.0
        for j in range(i):
            if not outside(p[j], c, r):
                continue
            c, r = _sphere2(p[i], p[j])
            for k in range(j):
                if not outside(p[k], c, r):
                    continue
                c, r = _sphere3(p[i], p[j], p[k])
                for m in range(k):
                    if outside(p[m], c, r):
                        c, r = _sphere4(p[i], p[j], p[k], p[m])
    # guard against round-off leaving a point marginally outside
    r = max(r, float(np.max(np.linalg.norm(pts - c, axis=1))))
    return c, r


# closest point queries -------------------------------------------------------


def closest_points_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to ``p``, row-wise.

    Returns ``(points, barycentrics)``. Follows the Voronoi-region case
    analysis from Ericson, Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.empty((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        bary[:] = np.stack([1 - v - w, v, w], axis=1)

        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[m] = np.stack([np.zeros(n), 1 - t, t], axis=1)[m]

        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        bary[m] = np.stack([1 - t, np.zeros(n), t], axis=1)[m]

        m = (d6 >= 0) & (d5 <= d6)
        bary[m] = (0.0, 0.0, 1.0)

        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        bary[m] = np.stack([1 - t, t, np.zeros(n)], axis=1)[m]

        m = (d3 >= 0) & (d4 <= d3)
        bary[m] = (0.0, 1.0, 0.0)

        m = (d1 <= 0) & (d2 <= 0)
        bary[m] = (1.0, 0.0, 0.0)
    bary = np.nan_to_num(bary, nan=1.0 / 3.0)
    pts = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return pts, bary


@njit(cache=True)
def _closest_on_triangle(px, py, pz, t):
    # scalar form of the Voronoi-region case analysis; t is a (3, 3) triangle
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    abx, aby, abz = t[1, 0] - ax, t[1, 1] - ay, t[1, 2] - az
    acx, acy, acz = t[2, 0] - ax, t[2, 1] - ay, t[2, 2] - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - t[1, 0], py - t[1, 1], pz - t[1, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - t[2, 0], py - t[2, 1], pz - t[2, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@njit(cache=True)
def _best_over_candidates(p, tri, cent, rad, indptr, cand, best_d, best_pt, best_f, best_b):
    for i in range(len(p)):
        px, py, pz = p[i, 0], p[i, 1], p[i, 2]
        for j in range(indptr[i], indptr[i + 1]):
            f = cand[j]
            # a face whose bounding ball is farther than the current best cannot win
            dc = math.sqrt((px - cent[f, 0]) ** 2 + (py - cent[f, 1]) ** 2 + (pz - cent[f, 2]) ** 2)
            if dc - rad[f] > best_d[i]:
                continue
            t = tri[f]
            u, v, w = _closest_on_triangle(px, py, pz, t)
            qx = u * t[0, 0] + v * t[1, 0] + w * t[2, 0]
            qy = u * t[0, 1] + v * t[1, 1] + w * t[2, 1]
            qz = u * t[0, 2] + v * t[1, 2] + w * t[2, 2]
            d = math.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)
            if d < best_d[i] or (d == best_d[i] and f < best_f[i]):
                best_d[i] = d
                best_pt[i, 0] = qx
                best_pt[i, 1] = qy
                best_pt[i, 2] = qz
                best_f[i] = f
                best_b[i, 0] = u
                best_b[i, 1] = v
                best_b[i, 2] = w


@njit(cache=True)
def _best_over_all(p, rows, tri, cent, rad, best_d, best_pt, best_f, best_b):
    nf = len(tri)
    for r in rows:
        px, py, pz = p[r, 0], p[r, 1], p[r, 2]
        for f in range(nf):
            dc = math.sqrt((px - cent[f, 0]) ** 2 + (py - cent[f, 1]) ** 2 + (pz - cent[f, 2]) ** 2)
            if dc - rad[f] > best_d[r]:
                continue
            t = tri[f]
            u, v, w = _closest_on_triangle(px, py, pz, t)
            qx = u * t[0, 0] + v * t[1, 0] + w * t[2, 0]
            qy = u * t[0, 1] + v * t[1, 1] + w * t[2, 1]
            qz = u * t[0, 2] + v * t[1, 2] + w * t[2, 2]
            d = math.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)
            if d < best_d[r] or (d == best_d[r] and f < best_f[r]):
                best_d[r] = d
                best_pt[r, 0] = qx
                best_pt[r, 1] = qy
                best_pt[r, 2] = qz
                best_f[r] = f
                best_b[r, 0] = u
                best_b[r, 1] = v
                best_b[r, 2] = w


class MeshProximity:
    """Exact nearest-surface-point queries against a triangle mesh.

    A KD-tree over face centroids proposes the ``k`` nearest faces. The
    answer is certified when the k-th centroid lies beyond ``best + r_max``
    (``r_max`` the largest face circumradius): no unvisited face can then hold
    a closer point. Uncertified points fall back to a scan over all faces,
    pruned by each face's bounding ball.
    """

    def __init__(self, mesh: TriangleMesh, k: int = 16):
        if mesh.is_empty:
            raise EmptyInput("mesh has no faces")
        self.mesh = mesh
        self._tri = np.ascontiguousarray(mesh.triangles())
        cent = self._tri.mean(axis=1)
        self._cent = np.ascontiguousarray(cent)
        self._rad = np.max(np.linalg.norm(self._tri - cent[:, None, :], axis=2), axis=1) * (1 + 1e-12)
        self._radius = float(self._rad.max())
        self._tree = cKDTree(cent)
        self._normals = mesh.face_normals()
        self._k = min(k, len(mesh.faces))

    def query(self, points):
        """Return ``(closest, distance, face_index, barycentric)``."""
        p = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        n = len(p)
        cd, ci = self._tree.query(p, k=self._k)
        cd = cd.reshape(n, -1)
        ci = np.ascontiguousarray(ci.reshape(n, -1), dtype=np.int64)
        best_d = np.full(n, np.inf)
        best_pt = np.zeros((n, 3))
        best_f = np.full(n, -1, dtype=np.int64)
        best_b = np.zeros((n, 3))
        indptr = np.arange(0, n * self._k + 1, self._k, dtype=np.int64)
        _best_over_candidates(p, self._tri, self._cent, self._rad, indptr, ci.reshape(-1), best_d, best_pt, best_f, best_b)
        if self._k < len(self._tri):
            uncertain = np.nonzero(cd[:, -1] <= best_d + self._radius)[0]
            if len(uncertain):
                _best_over_all(p, uncertain, self._tri, self._cent, self._rad, best_d, best_pt, best_f, best_b)
        return best_pt, best_d, best_f, best_b

    def face_normals(self, face_index):
        return self._normals[face_index]

    def distance(self, points):
        return self.query(points)[1]
