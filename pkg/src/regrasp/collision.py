"""Static distance field plus dynamic sphere sets for collision queries.

The field stores, per voxel, the exact Euclidean distance (meters) to the
nearest occupied voxel center, computed with the separable
lower-envelope-of-parabolas transform (Felzenszwalb and Huttenlocher).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

__all__ = [
    "DistanceField",
    "SphereSet",
    "CollisionWorld",
    "Violation",
    "build_edt",
    "voxelize_points",
    "voxelize_box",
    "query_distance",
    "check_free",
]

_INF = np.inf


@njit(cache=True)
def _envelope_1d(f, out, v, z):
    """Squared distance transform of one line; infinite samples are skipped."""
    n = len(f)
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == _INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -_INF
            z[1] = _INF
            continue
        while True:
            p = v[k]
            s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = -_INF if k == 0 else s
        z[k + 1] = _INF
    if k < 0:
        for q in range(n):
            out[q] = _INF
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = d * d + f[v[j]]


@njit(cache=True)
def _pass_last_axis(grid):
    m, n = grid.shape
    out = np.empty_like(grid)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for i in range(m):
        _envelope_1d(grid[i], out[i], v, z)
    return out


def _squared_edt(occupied):
    g = np.where(occupied, 0.0, _INF)
    for axis in range(g.ndim):
        moved = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        shape = moved.shape
        res = _pass_last_axis(moved.reshape(-1, shape[-1])).reshape(shape)
        g = np.moveaxis(res, -1, axis)
    return np.ascontiguousarray(g)


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Voxel grid; voxel ``(i, j, k)`` is centered at ``origin + (i, j, k) * resolution``."""

    origin: np.ndarray
    resolution: float
    dims: tuple
    distance: np.ndarray
    occupied_index: np.ndarray
    exhaustive: bool = True

    @property
    def sentinel(self):
        return self.resolution * float(np.linalg.norm(self.dims))

    def contains(self, p):
        g = (np.atleast_2d(p) - self.origin) / self.resolution
        return np.all((g >= 0) & (g <= np.asarray(self.dims) - 1), axis=1)

    @property
    def occupied_centers(self):
        return self.origin + self.occupied_index * self.resolution

    def _tree(self):
        t = self.__dict__.get("_kd")
        if t is None and len(self.occupied_index):
            t = cKDTree(self.occupied_centers)
            object.__setattr__(self, "_kd", t)
        return t

    def exact_distance(self, points):
        """Distance to the nearest occupied voxel center, by KD-tree lookup."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        tree = self._tree()
        if tree is None:
            return np.full(len(p), self.sentinel)
        return tree.query(p)[0]


def voxelize_points(points, origin, resolution, dims):
    """Boolean occupancy of the voxels whose centers are nearest to ``points``."""
    occ = np.zeros(tuple(dims), dtype=bool)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.round((p - np.asarray(origin)) / resolution).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    idx = idx[ok]
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def voxelize_box(occ, origin, resolution, lo, hi):
    """Mark voxels whose centers fall in the axis-aligned box ``[lo, hi]``."""
    dims = np.asarray(occ.shape)
    a = np.ceil((np.asarray(lo) - origin) / resolution - 1e-9).astype(int)
    b = np.floor((np.asarray(hi) - origin) / resolution + 1e-9).astype(int)
    a = np.clip(a, 0, dims)
    b = np.clip(b + 1, 0, dims)
    if np.all(b > a):
        occ[a[0] : b[0], a[1] : b[1], a[2] : b[2]] = True
    return occ


def build_edt(occupied, origin=(0.0, 0.0, 0.0), resolution=0.02, dims=None, exhaustive=True) -> DistanceField:
    """Exact Euclidean distance field over a voxel grid.

    ``occupied`` is either a boolean grid of shape ``dims`` or an ``(N, 3)``
    array of points (meters) that is voxelized first. With no occupied voxel
    every distance equals the grid diagonal.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    occ = np.asarray(occupied)
    if occ.dtype != bool:
        if dims is None:
            raise ValueError("dims required when voxelizing points")
        occ = voxelize_points(occ, origin, resolution, dims)
    dims = tuple(int(d) for d in occ.shape)
    if len(dims) != 3 or min(dims) <= 0:
        raise ValueError("dims must be three positive counts")
    idx = np.argwhere(occ)
    sentinel = resolution * float(np.linalg.norm(dims))
    if len(idx) == 0:
        dist = np.full(dims, sentinel)
    else:
        dist = np.sqrt(_squared_edt(occ)) * resolution
    dist.setflags(write=False)
    return DistanceField(origin, float(resolution), dims, dist, idx, exhaustive)


def query_distance(fld: DistanceField, p):
    """Trilinear interpolation of the field at ``p`` (one point or ``(N, 3)``).

    Outside the grid an exhaustive field returns a lower bound on the true
    distance (obstacles are known to lie inside the grid); a non-exhaustive
    field returns 0, treating unknown space as occupied.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    dims = np.asarray(fld.dims)
    g = (pts - fld.origin) / fld.resolution
    gc = np.clip(g, 0, dims - 1)
    outside = np.linalg.norm(g - gc, axis=1) * fld.resolution
    i0 = np.minimum(np.floor(gc).astype(np.int64), np.maximum(dims - 2, 0))
    frac = gc - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    d = fld.distance
    val = np.zeros(len(pts))
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = frac[:, 0] if cx else 1 - frac[:, 0]
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = frac[:, 1] if cy else 1 - frac[:, 1]
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = frac[:, 2] if cz else 1 - frac[:, 2]
                val += wx * wy * wz * d[ix, iy, iz]
    is_out = outside > 0
    if fld.exhaustive:
        val[is_out] = np.maximum(val[is_out] - outside[is_out], outside[is_out])
    else:
        val[is_out] = 0.0
    return float(val[0]) if single else val


@dataclass(frozen=True, eq=False)
class SphereSet:
    centers: np.ndarray
    radii: np.ndarray
    link_ids: tuple
    exclusions: frozenset = frozenset()

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(c) != len(r) or len(r) != len(self.link_ids):
            raise ValueError("centers, radii and link_ids must have equal length")
        if np.any(r <= 0):
            raise ValueError("sphere radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "link_ids", tuple(self.link_ids))
        object.__setattr__(self, "exclusions", frozenset(frozenset(p) for p in self.exclusions))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0), ())

    def __len__(self):
        return len(self.radii)

    def excluded(self, a, b):
        return a == b or frozenset((a, b)) in self.exclusions

    @staticmethod
    def merge(sets, extra_exclusions=()):
        sets = [s for s in sets if len(s)]
        if not sets:
            return SphereSet(np.zeros((0, 3)), np.zeros(0), (), frozenset(extra_exclusions))
        exc = set(extra_exclusions)
        for s in sets:
            exc |= set(s.exclusions)
        return SphereSet(
            np.vstack([s.centers for s in sets]),
            np.concatenate([s.radii for s in sets]),
            sum((s.link_ids for s in sets), ()),
            frozenset(exc),
        )


@dataclass(frozen=True, eq=False)
class CollisionWorld:
    static: DistanceField
    robot_static_geometry: SphereSet = field(default_factory=SphereSet.empty)
    clearance_margin: float = 0.0

    def __post_init__(self):
        if self.clearance_margin < 0:
            raise ValueError("clearance margin must be >= 0")


@dataclass(frozen=True)
class Violation:
    kind: str  # "environment", "robot_static" or "self"
    first: str
    second: str | None
    clearance: float


def _pairs(a: SphereSet, b: SphereSet | None, margin, exclusions):
    """Overlapping, non-excluded sphere pairs, in deterministic index order."""
    same = b is None
    b = a if same else b
    if len(a) == 0 or len(b) == 0:
        return None
    diff = a.centers[:, None, :] - b.centers[None, :, :]
    gap = np.linalg.norm(diff, axis=2) - (a.radii[:, None] + b.radii[None, :] + margin)
    hits = np.argwhere(gap <= 0)
    for i, j in hits:
        if same and j <= i:
            continue
        la, lb = a.link_ids[i], b.link_ids[j]
        if la == lb or frozenset((la, lb)) in exclusions:
            continue
        return la, lb, float(gap[i, j])
    return None


def check_free(world: CollisionWorld, dynamic: SphereSet):
    """Return ``(free, first_violation)``.

    A sphere clears the environment when its distance to the nearest occupied
    voxel center exceeds ``radius + margin``. The trilinear field value is
    used as a filter; within ``resolution * sqrt(3)`` of the threshold the
    exact distance is looked up, so the verdict never depends on
    interpolation error.
    """
    margin = world.clearance_margin
    if len(dynamic):
        fld = world.static
        need = dynamic.radii + margin
        approx = query_distance(fld, dynamic.centers)
        band = fld.resolution * math.sqrt(3.0)
        inside = fld.contains(dynamic.centers)
        unsure = np.abs(approx - need) <= band
        if fld.exhaustive:
            unsure |= ~inside
        d = approx.copy()
        if np.any(unsure):
            d[unsure] = fld.exact_distance(dynamic.centers[unsure])
        if not fld.exhaustive:
            d[~inside] = 0.0
        bad = np.nonzero(d <= need)[0]
        if len(bad):
            i = int(bad[0])
            return False, Violation("environment", dynamic.link_ids[i], None, float(d[i] - need[i]))

    exclusions = dynamic.exclusions | world.robot_static_geometry.exclusions
    hit = _pairs(dynamic, world.robot_static_geometry, margin, exclusions)
    if hit:
        return False, Violation("robot_static", *hit)
    hit = _pairs(dynamic, None, margin, exclusions)
    if hit:
        return False, Violation("self", *hit)
    return True, None
