"""Serial-chain kinematics for a dual-arm robot and the joint-limit cost.

Joint states are plain float arrays of radians, one entry per joint.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigError, DimensionMismatch, Infeasible
from .geometry import RigidTransform, matrix_to_rotvec

ROBOT_ENV_VAR = "REGRASP_ROBOT"
DEFAULT_EPSILON = 0.35
STALL_ITERATIONS = 25


@dataclass(frozen=True)
class Joint:
    origin: RigidTransform
    axis: np.ndarray
    lower: float
    upper: float
    name: str = ""

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        object.__setattr__(self, "axis", a / np.linalg.norm(a))
        if not self.lower < self.upper:
            raise ConfigError(f"joint {self.name!r}: lower limit must be below upper")


@dataclass(frozen=True)
class LinkSphere:
    link: int  # 0 = arm mount, i = frame after joint i, n+1 = tip frame
    center: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class KinematicChain:
    joints: tuple
    base_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    tip_offset: RigidTransform = field(default_factory=RigidTransform.identity)
    home: np.ndarray | None = None
    spheres: tuple = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "spheres", tuple(self.spheres))
        home = np.zeros(self.dof) if self.home is None else np.asarray(self.home, dtype=np.float64)
        object.__setattr__(self, "home", home)
        object.__setattr__(self, "_origins", np.array([j.origin.matrix for j in self.joints]))
        object.__setattr__(self, "_axes", np.array([j.axis for j in self.joints]).reshape(-1, 3))
        object.__setattr__(self, "_base", self.base_pose.matrix)
        object.__setattr__(self, "_tip", self.tip_offset.matrix)

    @property
    def dof(self):
        return len(self.joints)

    @property
    def lower(self):
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self):
        return np.array([j.upper for j in self.joints])

    def reach(self):
        """Sum of link lengths from the arm mount to the tip."""
        total = sum(float(np.linalg.norm(j.origin.translation)) for j in self.joints)
        return total + float(np.linalg.norm(self.tip_offset.translation))

    def frames(self, theta):
        """World 4x4 frames: mount, after each joint, tip (``dof + 2`` total)."""
        theta = _check_state(self, theta)
        return _frames_nb(self._base, self._origins, self._axes, self._tip, theta)

    def fk_matrix(self, theta):
        return self.frames(theta)[-1]

    def jacobian(self, theta, frames=None):
        """Geometric 6 x n Jacobian (linear rows first) at the tip."""
        f = self.frames(theta) if frames is None else frames
        return _jacobian_nb(f, self._axes)

    def sphere_positions(self, theta, frames=None):
        f = self.frames(theta) if frames is None else frames
        if not self.spheres:
            return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
        centers = np.array([f[s.link, :3, :3] @ s.center + f[s.link, :3, 3] for s in self.spheres])
        radii = np.array([s.radius for s in self.spheres])
        links = np.array([s.link for s in self.spheres])
        return centers, radii, links


@dataclass(frozen=True, eq=False)
class DualArmModel:
    left: KinematicChain
    right: KinematicChain
    torso_spheres: tuple = ()
    camera_pose: RigidTransform | None = None
    gripper_max_width: dict = field(default_factory=lambda: {"left": 0.085, "right": 0.085})
    name: str = ""

    def arm(self, side):
        return self.left if side == "left" else self.right


def _check_state(chain, theta):
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if len(theta) != chain.dof:
        raise DimensionMismatch(f"expected {chain.dof} joint values, got {len(theta)}")
    return theta


def fk(chain: KinematicChain, theta) -> RigidTransform:
    return RigidTransform.from_matrix(chain.fk_matrix(theta))


def pose_error(current, target):
    """6-vector ``[dp, rotvec(R_t R_c^T)]`` from ``current`` to ``target`` (4x4)."""
    dp = target[:3, 3] - current[:3, 3]
    dr = matrix_to_rotvec(target[:3, :3] @ current[:3, :3].T)
    return np.concatenate([dp, dr])


@dataclass
class IkParams:
    pos_tol: float = 1e-3
    rot_tol: float = math.radians(0.5)
    max_iter: int = 200
    restarts: int = 5
    damping: float = 0.05
    max_step: float = 0.3
    seed: int = 0


def ik(chain: KinematicChain, target: RigidTransform, seed_state=None, params: IkParams | None = None):
    """Damped least-squares IK with limit clamping and random restarts.

    Attempt 0 starts from ``seed_state`` (default: the chain's home pose);
    further attempts start from uniformly drawn joint states, generated from
    ``params.seed`` so the outcome depends only on the inputs. The first
    attempt that converges wins. Raises :class:`Infeasible` otherwise.
    """
    params = params or IkParams()
    tgt = target.matrix
    lo, hi = chain.lower, chain.upper
    seed_state = chain.home if seed_state is None else _check_state(chain, seed_state)

    # cheap reachability gate before any iteration
    mount = chain.frames(chain.home)[0, :3, 3]
    if np.linalg.norm(tgt[:3, 3] - mount) > chain.reach() + params.pos_tol:
        raise Infeasible("target beyond arm reach")

    rng = np.random.default_rng(params.seed)
    for attempt in range(params.restarts + 1):
        if attempt == 0:
            theta = np.clip(seed_state, lo, hi)
        else:
            theta = rng.uniform(lo, hi)
        sol = _dls(chain, tgt, theta, lo, hi, params)
        if sol is not None:
            return sol
    raise Infeasible("IK did not converge")


def _dls(chain, tgt, theta, lo, hi, params):
    theta, ok = _dls_kernel(
        chain._base, chain._origins, chain._axes, chain._tip, lo, hi, tgt, theta,
        params.pos_tol, params.rot_tol, params.max_iter, params.damping, params.max_step,
    )
    return theta if ok else None


@njit(cache=True)
def _rotvec_nb(m):
    # log map of a rotation matrix, stable near 0 and pi
    c = (m[0, 0] + m[1, 1] + m[2, 2] - 1.0) * 0.5
    c = min(1.0, max(-1.0, c))
    angle = math.acos(c)
    v = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if angle < 1e-6:
        return 0.5 * v
    if angle > math.pi - 1e-4:
        # axis from the symmetric part
        b = np.empty(3)
        for i in range(3):
            b[i] = math.sqrt(max((m[i, i] - c) / (1.0 - c), 0.0))
        k = np.argmax(b)
        for i in range(3):
            if i != k:
                b[i] = math.copysign(b[i], m[k, i] + m[i, k])
        if v @ b < 0:
            b = -b
        return b / np.linalg.norm(b) * angle
    return v * (angle / (2.0 * math.sin(angle)))


@njit(cache=True)
def _frames_nb(base, origins, axes, tip, theta):
    n = len(theta)
    out = np.empty((n + 2, 4, 4))
    m = base.copy()
    out[0] = m
    r = np.eye(4)
    for i in range(n):
        x, y, z = axes[i, 0], axes[i, 1], axes[i, 2]
        s, c = math.sin(theta[i]), math.cos(theta[i])
        t = 1.0 - c
        r[0, 0] = c + x * x * t
        r[0, 1] = x * y * t - z * s
        r[0, 2] = x * z * t + y * s
        r[1, 0] = y * x * t + z * s
        r[1, 1] = c + y * y * t
        r[1, 2] = y * z * t - x * s
        r[2, 0] = z * x * t - y * s
        r[2, 1] = z * y * t + x * s
        r[2, 2] = c + z * z * t
        m = m @ origins[i] @ r
        out[i + 1] = m
    out[n + 1] = m @ tip
    return out


@njit(cache=True)
def _jacobian_nb(frames, axes):
    n = axes.shape[0]
    jac = np.empty((6, n))
    p_tip = frames[n + 1, :3, 3]
    z = np.empty(3)
    for i in range(n):
        for r in range(3):
            z[r] = frames[i + 1, r, 0] * axes[i, 0] + frames[i + 1, r, 1] * axes[i, 1] + frames[i + 1, r, 2] * axes[i, 2]
        d = p_tip - frames[i + 1, :3, 3]
        jac[0, i] = z[1] * d[2] - z[2] * d[1]
        jac[1, i] = z[2] * d[0] - z[0] * d[2]
        jac[2, i] = z[0] * d[1] - z[1] * d[0]
        jac[3:, i] = z
    return jac


@njit(cache=True)
def _err_nb(cur, tgt):
    e = np.empty(6)
    e[:3] = tgt[:3, 3] - cur[:3, 3]
    m = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m[i, j] = tgt[i, 0] * cur[j, 0] + tgt[i, 1] * cur[j, 1] + tgt[i, 2] * cur[j, 2]
    e[3:] = _rotvec_nb(m)
    return e


@njit(cache=True)
def _dls_kernel(base, origins, axes, tip, lo, hi, tgt, theta, pos_tol, rot_tol, max_iter, damping, max_step):
    theta = np.minimum(np.maximum(theta, lo), hi)
    lam2 = damping * damping
    eye6 = np.eye(6)
    best = np.inf
    since = 0
    for _ in range(max_iter + 1):
        frames = _frames_nb(base, origins, axes, tip, theta)
        err = _err_nb(frames[-1].copy(), tgt)
        ep, er = np.linalg.norm(err[:3]), np.linalg.norm(err[3:])
        if ep <= pos_tol and er <= rot_tol:
            return theta, True
        # give up on an attempt that has stopped making progress
        score = ep / pos_tol + er / rot_tol
        if score < 0.99 * best:
            best = score
            since = 0
        else:
            since += 1
            if since > STALL_ITERATIONS:
                return theta, False
        jac = _jacobian_nb(frames, axes)
        step = jac.T @ np.linalg.solve(jac @ jac.T + lam2 * eye6, err)
        # joints pinned at a limit and pushed outward leave the active set
        blocked = ((theta <= lo) & (step < 0.0)) | ((theta >= hi) & (step > 0.0))
        if blocked.any():
            for j in range(len(theta)):
                if blocked[j]:
                    jac[:, j] = 0.0
            step = jac.T @ np.linalg.solve(jac @ jac.T + lam2 * eye6, err)
        nrm = np.linalg.norm(step)
        if nrm > max_step:
            step *= max_step / nrm
        theta = np.minimum(np.maximum(theta + step, lo), hi)
    return theta, False


def joint_proximity(theta, chain: KinematicChain):
    """Per-joint distance to the nearer joint limit, in radians.

    ``theta`` is one state or an ``(n, dof)`` batch.
    """
    theta = np.asarray(theta, dtype=np.float64)
    theta = _check_state(chain, theta) if theta.ndim < 2 else _check_batch(chain, theta)
    return np.minimum(np.abs(chain.upper - theta), np.abs(theta - chain.lower))


def _check_batch(chain, theta):
    if theta.ndim != 2 or theta.shape[1] != chain.dof:
        raise DimensionMismatch(f"expected (n, {chain.dof}) joint values, got {theta.shape}")
    return theta


def proximity_cost_from_delta(delta, epsilon=DEFAULT_EPSILON):
    """Mean over joints of ``d^2/eps^2 - 2 d/eps + 1`` with ``d = min(delta, eps)``.

    Clamping at ``eps`` keeps the cost in [0, 1]; without it the quadratic
    rises again for joints farther than ``eps`` from their limits. A 2-D
    ``delta`` is a batch, one cost per row.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = np.minimum(np.asarray(delta, dtype=np.float64), epsilon)
    terms = d**2 / epsilon**2 - 2.0 * d / epsilon + 1.0
    if d.ndim >= 2:
        return np.mean(terms, axis=-1)
    return float(np.mean(terms))


def proximity_cost(states, chains, epsilon=DEFAULT_EPSILON):
    """Joint-limit proximity cost of one chain or several chains jointly.

    ``states``/``chains`` may be a single state and chain, or matching
    sequences whose proximities are concatenated into one vector. States
    given as ``(n, dof)`` batches give an array of ``n`` costs.
    """
    if isinstance(chains, KinematicChain):
        chains, states = [chains], [states]
    if len(chains) != len(states):
        raise DimensionMismatch("one joint state per chain required")
    delta = np.concatenate([joint_proximity(s, c) for s, c in zip(states, chains)], axis=-1)
    return proximity_cost_from_delta(delta, epsilon)


# robot description files ---------------------------------------------------------


def _pose(d):
    if d is None:
        return RigidTransform.identity()
    return RigidTransform.from_dict(d)


def _chain_from_dict(d, name):
    joints = [
        Joint(_pose(j.get("origin")), j["axis"], float(j["lower"]), float(j["upper"]), j.get("name", f"{name}_{i}"))
        for i, j in enumerate(d["joints"])
    ]
    spheres = [LinkSphere(int(s["link"]), np.asarray(s["center"], dtype=float), float(s["radius"])) for s in d.get("spheres", [])]
    return KinematicChain(
        joints=joints,
        base_pose=_pose(d.get("base_pose")),
        tip_offset=_pose(d.get("tip_offset")),
        home=d.get("home"),
        spheres=spheres,
        name=name,
    )


def load_robot(path=None) -> DualArmModel:
    """Load a dual-arm description; falls back to ``$REGRASP_ROBOT`` then the bundled robot."""
    path = path or os.environ.get(ROBOT_ENV_VAR)
    if path:
        text = Path(path).read_text()
    else:
        text = resources.files("regrasp.data").joinpath("dual_arm.json").read_text()
    d = json.loads(text)
    try:
        left = _chain_from_dict(d["arms"]["left"], "left")
        right = _chain_from_dict(d["arms"]["right"], "right")
    except KeyError as exc:
        raise ConfigError(f"robot description missing key {exc}") from exc
    torso = tuple((np.asarray(s["center"], dtype=float), float(s["radius"])) for s in d.get("torso_spheres", []))
    cam = _pose(d["camera_pose"]) if "camera_pose" in d else None
    widths = d.get("gripper_max_width", {"left": 0.085, "right": 0.085})
    return DualArmModel(left, right, torso, cam, widths, d.get("name", ""))
