"""Category shape space: CPD deformation fields, PCA, latent inference, pose warping.

A model holds a canonical mesh and a linear space of per-vertex deformation
fields. A latent descriptor ``(z, local_rigid)`` decodes to

    local_rigid( canonical + mean_field + basis @ z )

with the canonical connectivity, so annotated poses on the canonical mesh can
be carried to any decoded instance.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, EmptyCloud, InsufficientTrainingData, NonFinite
from .geometry import MeshProximity, PointCloud, RigidTransform, TriangleMesh, rotvec_to_matrix

__all__ = [
    "CpdParams",
    "DeformationField",
    "ShapeSpaceModel",
    "LatentDescriptor",
    "InferParams",
    "RegistrationResult",
    "cpd_nonrigid",
    "train_shape_space",
    "encode",
    "decode",
    "infer",
    "inference_energy",
    "warp_pose",
    "save_model",
    "load_model",
]


@dataclass
class CpdParams:
    beta: float = 2.0  # Gaussian kernel width, in normalized units
    lam: float = 3.0  # smoothness weight
    max_em_iterations: int = 150
    tolerance: float = 1e-6
    outlier_weight: float = 0.1


@dataclass(frozen=True, eq=False)
class DeformationField:
    displacements: np.ndarray  # (V, 3) meters

    def __post_init__(self):
        d = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(d)):
            raise NonFinite("deformation field has non-finite entries")
        object.__setattr__(self, "displacements", d)

    @property
    def canonical_vertex_count(self):
        return len(self.displacements)

    def flat(self):
        return self.displacements.reshape(-1)


@dataclass(frozen=True, eq=False)
class ShapeSpaceModel:
    canonical: TriangleMesh
    mean_field: DeformationField
    basis: np.ndarray  # (3V, L), orthonormal columns
    training_variances: np.ndarray  # (L,)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        v = np.asarray(self.training_variances, dtype=np.float64).reshape(-1)
        nv = len(self.canonical.vertices)
        if b.ndim != 2 or b.shape[0] != 3 * nv:
            raise DimensionMismatch(f"basis must have {3 * nv} rows")
        if b.shape[1] != len(v):
            raise DimensionMismatch("one variance per basis column")
        if self.mean_field.canonical_vertex_count != nv:
            raise DimensionMismatch("mean field size differs from canonical vertex count")
        if np.any(v < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "training_variances", v)

    @property
    def latent_dim(self):
        return self.basis.shape[1]

    @property
    def sigma(self):
        """Per-component standard deviation, floored to stay invertible."""
        v = self.training_variances
        floor = max(float(v.max(initial=0.0)), 1e-12) * 1e-9
        return np.sqrt(np.maximum(v, floor))


@dataclass(frozen=True)
class LatentDescriptor:
    z: np.ndarray
    local_rigid: RigidTransform = RigidTransform()

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(z)):
            raise NonFinite("latent vector has non-finite entries")
        object.__setattr__(self, "z", z)


@dataclass
class InferParams:
    max_iterations: int = 80
    latent_reg_weight: float = 1.0  # on z in units of per-component std
    noise_scale: float = 0.004  # meters; residuals are measured in this unit
    tolerance: float = 1e-7  # relative cost decrease that counts as converged
    armijo: float = 1e-4
    max_backtracks: int = 20


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    latent: LatentDescriptor
    deformed_mesh: TriangleMesh  # object frame, local_rigid applied
    fitness_rms: float
    converged: bool = True
    iterations: int = 0
    costs: tuple = ()


# CPD --------------------------------------------------------------------------


def _normalize(p):
    m = p.mean(axis=0)
    s = np.sqrt(np.sum((p - m) ** 2) / len(p))
    return (p - m) / (s if s > 0 else 1.0), m, (s if s > 0 else 1.0)


def cpd_nonrigid(canonical_points, instance_points, params: CpdParams | None = None) -> DeformationField:
    """Coherent Point Drift from ``canonical_points`` (moving) onto ``instance_points``.

    Each cloud is normalized to zero mean and unit RMS radius on its own; the
    result is denormalized into the instance's frame and returned as the
    displacement of every canonical point.
    """
    params = params or CpdParams()
    y0 = np.asarray(getattr(canonical_points, "points", canonical_points), dtype=np.float64).reshape(-1, 3)
    x0 = np.asarray(getattr(instance_points, "points", instance_points), dtype=np.float64).reshape(-1, 3)
    if len(y0) == 0 or len(x0) == 0:
        raise EmptyCloud("CPD needs two non-empty clouds")
    if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(x0))):
        raise NonFinite("CPD input has non-finite coordinates")
    y, _, _ = _normalize(y0)
    x, mx, sx = _normalize(x0)
    m, n, dim = len(y), len(x), 3
    w = params.outlier_weight
    g = np.exp(-cdist(y, y, "sqeuclidean") / (2.0 * params.beta**2))
    t = y.copy()
    sigma2 = np.sum(cdist(x, y, "sqeuclidean")) / (dim * m * n)
    xx = np.sum(x * x, axis=1)
    prev = np.inf
    for _ in range(params.max_em_iterations):
        d2 = cdist(t, x, "sqeuclidean")
        num = np.exp(-(d2 - d2.min(axis=0)) / (2.0 * sigma2))
        # outlier constant carried with the same shift as the numerator
        c = (2.0 * np.pi * sigma2) ** (dim / 2) * w / (1.0 - w) * m / n
        # overflow to inf makes a far point a pure outlier, which is the limit
        with np.errstate(over="ignore"):
            c = c * np.exp(d2.min(axis=0) / (2.0 * sigma2))
        p = num / (num.sum(axis=0) + c)
        p1 = p.sum(axis=1)
        pt1 = p.sum(axis=0)
        px = p @ x
        np_ = p1.sum()
        a = p1[:, None] * g + params.lam * sigma2 * np.eye(m)
        wgt = np.linalg.solve(a, px - p1[:, None] * y)
        t = y + g @ wgt
        sigma2 = (pt1 @ xx - 2.0 * np.sum(px * t) + p1 @ np.sum(t * t, axis=1)) / (np_ * dim)
        if not np.isfinite(sigma2) or not np.all(np.isfinite(t)):
            raise NonFinite("CPD diverged")
        sigma2 = max(sigma2, 1e-10)
        if abs(prev - sigma2) < params.tolerance * max(prev if np.isfinite(prev) else 1.0, 1e-12):
            break
        prev = sigma2
    deformed = t * sx + mx
    return DeformationField(deformed - y0)


# training ---------------------------------------------------------------------


def _instance_cloud(mesh, n_samples, rng):
    return np.vstack([mesh.vertices, mesh.sample_surface(n_samples, rng).points])


def default_latent_dim(variances, threshold=0.95):
    v = np.asarray(variances, dtype=np.float64)
    total = v.sum()
    if total <= 0:
        return 1
    return int(np.searchsorted(np.cumsum(v) / total, threshold - 1e-12) + 1)


def train_shape_space(
    canonical: TriangleMesh,
    training_meshes,
    latent_dim: int | None = None,
    cpd: CpdParams | None = None,
    n_samples: int = 400,
    seed: int = 0,
    metadata: dict | None = None,
    return_fields: bool = False,
) -> ShapeSpaceModel:
    """Fit CPD fields canonical -> each training mesh and keep their principal components.

    Both sides are vertices plus ``n_samples`` area-weighted surface samples
    so the two mixtures see the same surface density. Training meshes must
    already share the canonical's frame. ``latent_dim=None`` keeps the
    fewest components explaining 95% of the variance. With
    ``return_fields`` the per-instance training fields are returned as well.
    """
    training_meshes = list(training_meshes)
    k = len(training_meshes)
    if k < 2:
        raise InsufficientTrainingData("need at least two training meshes")
    if latent_dim is not None and not 1 <= latent_dim <= k:
        raise InsufficientTrainingData(f"latent_dim must be in [1, {k}]")
    nv = len(canonical.vertices)
    # same seed for every mesh: meshes sharing connectivity get corresponding samples
    src = _instance_cloud(canonical, n_samples, np.random.default_rng(seed))
    fields = np.empty((k, 3 * nv))
    for i, mesh in enumerate(training_meshes):
        f = cpd_nonrigid(src, _instance_cloud(mesh, n_samples, np.random.default_rng(seed)), cpd)
        fields[i] = f.displacements[:nv].reshape(-1)
    mean = fields.mean(axis=0)
    _, s, vt = np.linalg.svd(fields - mean, full_matrices=False)
    variances = s**2 / (k - 1)
    if latent_dim is None:
        latent_dim = default_latent_dim(variances)
    meta = dict(metadata or {})
    meta.setdefault("explained_variance_ratio", (variances / max(variances.sum(), 1e-300)).tolist())
    model = ShapeSpaceModel(canonical, DeformationField(mean.reshape(-1, 3)), vt[:latent_dim].T.copy(), variances[:latent_dim], meta)
    if return_fields:
        return model, [DeformationField(f.reshape(-1, 3)) for f in fields]
    return model


def encode(model: ShapeSpaceModel, deformation) -> np.ndarray:
    """Latent coordinates of a deformation field (projection onto the basis)."""
    f = deformation.flat() if isinstance(deformation, DeformationField) else np.asarray(deformation, dtype=np.float64).reshape(-1)
    if f.size != model.basis.shape[0]:
        raise DimensionMismatch("field size differs from the model's")
    return model.basis.T @ (f - model.mean_field.flat())


def _shape_vertices(model, z):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != model.latent_dim:
        raise DimensionMismatch(f"latent vector has {z.size} entries, model expects {model.latent_dim}")
    disp = model.mean_field.flat() + model.basis @ z
    return model.canonical.vertices + disp.reshape(-1, 3)


def decode(model: ShapeSpaceModel, latent: LatentDescriptor) -> TriangleMesh:
    return model.canonical.with_vertices(latent.local_rigid.apply(_shape_vertices(model, latent.z)))


# inference --------------------------------------------------------------------


def _interp_rows(model, face, bary):
    """Per point: the unwarped surface point ``a`` and its linear map ``G`` in z."""
    fv = model.canonical.faces[face]  # (N, 3)
    base = model.canonical.vertices + model.mean_field.displacements
    a = np.einsum("nk,nkd->nd", bary, base[fv])
    b = model.basis.reshape(-1, 3, model.latent_dim)  # (V, 3, L)
    g = np.einsum("nk,nkdl->ndl", bary, b[fv])
    return a, g


def inference_energy(model, points, face, bary, z, local_rigid, latent_reg_weight=1.0, noise_scale=0.004):
    """Cost with fixed surface correspondences and its gradient in ``z``.

    Each point ``i`` is paired with the surface point given by ``face[i]`` and
    barycentric ``bary[i]`` on the decoded mesh:

        E = sum_i |T(q_i(z)) - p_i|^2 / s^2 + w * sum_l (z_l / sigma_l)^2
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    a, g = _interp_rows(model, face, bary)
    u = a + np.einsum("ndl,l->nd", g, z)
    r = local_rigid.apply(u) - points
    sig = model.sigma
    s2 = noise_scale**2
    e = np.sum(r * r) / s2 + latent_reg_weight * np.sum((z / sig) ** 2)
    rr = r @ local_rigid.rotation  # R^T r, row-wise
    grad = 2.0 * np.einsum("ndl,nd->l", g, rr) / s2 + 2.0 * latent_reg_weight * z / sig**2
    return float(e), grad


def infer(
    model: ShapeSpaceModel,
    observed: PointCloud,
    init_pose: RigidTransform | None = None,
    params: InferParams | None = None,
    init_latent: LatentDescriptor | None = None,
) -> RegistrationResult:
    """Fit latent shape and local rigid motion to ``observed``.

    ``observed`` is mapped into the object frame by ``init_pose^-1``. Each
    iteration recomputes exact closest surface points on the current decoded
    mesh, then takes a Gauss-Newton-preconditioned gradient step in
    ``(z / sigma, rotation, translation)`` with Armijo backtracking on the cost
    at those correspondences. Since a closest point is never farther than the
    held correspondence, the true cost never increases between iterations.
    """
    params = params or InferParams()
    init_pose = init_pose or RigidTransform.identity()
    if len(observed) == 0:
        raise EmptyCloud("observed cloud is empty")
    pts = init_pose.inverse().apply(observed.points)
    if not np.all(np.isfinite(pts)):
        raise NonFinite("observed cloud has non-finite coordinates")
    big_l = model.latent_dim
    sig = model.sigma
    w = params.latent_reg_weight
    s2 = params.noise_scale**2
    n = len(pts)
    c = pts.mean(axis=0)

    lat = init_latent or LatentDescriptor(np.zeros(big_l))
    y = lat.z / sig
    rot = lat.local_rigid.rotation
    trans = lat.local_rigid.translation.copy()

    def state(y_, rot_, trans_):
        return LatentDescriptor(y_ * sig, RigidTransform.from_rotation(rot_, trans_))

    def true_cost(y_, rot_, trans_):
        mesh = decode(model, state(y_, rot_, trans_))
        _, d, face, bary = MeshProximity(mesh).query(pts)
        return float(np.sum(d * d) / s2 + w * np.sum(y_ * y_)), d, face, bary

    cost, d, face, bary = true_cost(y, rot, trans)
    costs = [cost]
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        a, g = _interp_rows(model, face, bary)
        gs = g * sig  # derivative in y

        def fixed(y_, rot_, trans_):
            u = a + np.einsum("ndl,l->nd", g, y_ * sig)
            r = u @ rot_.T + trans_ - pts
            return float(np.sum(r * r) / s2 + w * np.sum(y_ * y_)), r, u

        e0, r, u = fixed(y, rot, trans)
        ru = u @ rot.T - c
        jac = np.empty((n, 3, big_l + 6))
        jac[:, :, :big_l] = np.einsum("ij,njl->nil", rot, gs)
        jac[:, :, big_l : big_l + 3] = _neg_skew_rows(ru)
        jac[:, :, big_l + 3 :] = np.eye(3)
        jf = jac.reshape(3 * n, -1)
        rf = r.reshape(-1)
        grad = 2.0 * jf.T @ rf / s2
        grad[:big_l] += 2.0 * w * y
        h = 2.0 * jf.T @ jf / s2
        h[np.arange(big_l), np.arange(big_l)] += 2.0 * w
        h += 1e-9 * np.trace(h) / len(h) * np.eye(len(h))
        step = -np.linalg.solve(h, grad)
        slope = float(grad @ step)
        if not np.isfinite(slope):
            raise NonFinite("non-finite search direction")
        if slope >= 0:
            step, slope = -grad, -float(grad @ grad)
        alpha = 1.0
        accepted = False
        for _ in range(params.max_backtracks):
            ny = y + alpha * step[:big_l]
            dr = rotvec_to_matrix(alpha * step[big_l : big_l + 3])
            nrot = dr @ rot
            ntrans = dr @ (trans - c) + c + alpha * step[big_l + 3 :]
            e1, _, _ = fixed(ny, nrot, ntrans)
            if e1 <= e0 + params.armijo * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        new_cost, nd, nface, nbary = true_cost(ny, nrot, ntrans)
        if not np.isfinite(new_cost):
            raise NonFinite("inference cost became non-finite")
        y, rot, trans = ny, nrot, ntrans
        d, face, bary = nd, nface, nbary
        rel = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        costs.append(cost)
        if rel < params.tolerance:
            converged = True
            break
    lat = state(y, rot, trans)
    return RegistrationResult(
        lat,
        decode(model, lat),
        float(np.sqrt(np.mean(d * d))),
        converged,
        it,
        tuple(costs),
    )


def _neg_skew_rows(v):
    """Stack of ``-[v_i]_x``: the derivative of ``w x v_i`` in ``w``."""
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = v[:, 2], -v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = -v[:, 2], v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = v[:, 1], -v[:, 0]
    return out


# pose warping -----------------------------------------------------------------


def _local_affine(src, dst, x, bandwidth):
    """Kernel-weighted affine fit of the displacement ``dst - src``, evaluated at ``x``.

    Affine displacement fields are reproduced exactly.
    """
    d2 = np.sum((src - x) ** 2, axis=1)
    wts = np.exp(-(d2 - d2.min()) / (2.0 * bandwidth**2))
    wts /= wts.sum()
    xc = wts @ src
    disp = dst - src
    dc = wts @ disp
    s = src - xc
    cov = (s * wts[:, None]).T @ s
    cross = (s * wts[:, None]).T @ (disp - dc)
    ridge = 1e-12 * max(np.trace(cov), 1e-300)
    m = np.linalg.solve(cov + ridge * np.eye(3), cross).T
    return x + dc + m @ (x - xc)


def warp_pose(
    model: ShapeSpaceModel,
    result: RegistrationResult | LatentDescriptor,
    pose_on_canonical: RigidTransform,
    delta: float = 0.01,
    bandwidth: float | None = None,
) -> RigidTransform:
    """Carry a pose on the canonical mesh to the registered instance.

    The origin and three points ``delta`` along the pose axes are moved with
    the locally fitted deformation; the displaced axes are projected to the
    nearest rotation and the result is composed with ``local_rigid``. The
    kernel bandwidth defaults to 15% of the canonical diagonal.
    """
    lat = result.latent if isinstance(result, RegistrationResult) else result
    src = model.canonical.vertices
    dst = _shape_vertices(model, lat.z)
    h = bandwidth if bandwidth is not None else 0.15 * model.canonical.diagonal()
    o = pose_on_canonical.translation
    r = pose_on_canonical.rotation
    p0 = _local_affine(src, dst, o, h)
    axes = np.column_stack([(_local_affine(src, dst, o + delta * r[:, k], h) - p0) / delta for k in range(3)])
    u, _, vt = np.linalg.svd(axes)
    if np.linalg.det(u @ vt) < 0:
        u[:, -1] *= -1
    warped = RigidTransform.from_rotation(u @ vt, p0)
    return lat.local_rigid @ warped


# persistence ------------------------------------------------------------------

_MAGIC = b"RGSS"
_VERSION = 1


def save_model(path, model: ShapeSpaceModel):
    """Binary model plus ``<path>.json`` sidecar.

    Layout (little-endian): ``b"RGSS"``, u32 version, u32 V, u32 F, u32 L,
    f64[L] variances, f64[V*3] canonical vertices, u32[F*3] faces,
    f64[V*3] mean field, f64[3V*L] basis (row-major).
    """
    path = Path(path)
    c = model.canonical
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", _VERSION, len(c.vertices), len(c.faces), model.latent_dim))
        for arr, dt in (
            (model.training_variances, "<f8"),
            (c.vertices, "<f8"),
            (c.faces, "<u4"),
            (model.mean_field.displacements, "<f8"),
            (model.basis, "<f8"),
        ):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(str(path) + ".json").write_text(json.dumps(model.metadata, indent=2, sort_keys=True))


def load_model(path) -> ShapeSpaceModel:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a shape space model")
    version, nv, nf, big_l = struct.unpack_from("<4I", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 20

    def take(count, dt):
        nonlocal off
        a = np.frombuffer(buf, dtype=dt, count=count, offset=off)
        off += a.nbytes
        return a

    var = take(big_l, "<f8").astype(np.float64)
    verts = take(3 * nv, "<f8").reshape(nv, 3).astype(np.float64)
    faces = take(3 * nf, "<u4").reshape(nf, 3).astype(np.int64)
    mean = take(3 * nv, "<f8").reshape(nv, 3).astype(np.float64)
    basis = take(3 * nv * big_l, "<f8").reshape(3 * nv, big_l).astype(np.float64)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return ShapeSpaceModel(TriangleMesh(verts, faces), DeformationField(mean), basis, var, meta)
