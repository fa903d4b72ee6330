"""Synthetic scenes and the end-to-end functional regrasp pipeline.

A scene places one category instance (decoded from a shape-space latent) on a
table in front of the robot. Perception is an oracle: the object is rendered
from the robot's sensor, segmented exactly, and its pose is handed over with
configurable noise. The pipeline then runs, in order:

    pose_refinement -> shape_registration -> grasp_sampling -> handover
    -> view_pose -> inhand_observation -> inhand_refinement -> evaluation

The supportive hand's grip is disturbed between the handover and the
observation, which is what the in-hand refinement has to undo.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .collision import CollisionWorld, SphereSet, build_edt, voxelize_box
from .errors import ConfigError, NoViewPoseFound, RegraspError
from .geometry import PointCloud, RigidTransform, TriangleMesh
from .grasping import GripperParams, sample_antipodal, select_candidates
from .handover import (
    CostParams,
    HandoverContext,
    PlannerStats,
    SamplingParams,
    _hand_links,
    arm_spheres,
    filter_grasps,
    object_sphere_cover,
    plan_handover,
    robot_static_spheres,
    sample_transforms,
)
from .icp import Cuboid, IcpParams, icp_register, inhand_refine
from .io import read_mesh
from .kinematics import DualArmModel, IkParams
from .render import PinholeCamera, render_depth, render_labels, top_down_camera
from .shape_space import LatentDescriptor, ShapeSpaceModel, decode, infer, train_shape_space, warp_pose
from .shapes import box_mesh, category_instance
from .view_pose import ViewPoseRequest, ViewSampling, generate_view_pose

__all__ = [
    "REPORT_VERSION",
    "SceneConfig",
    "Scene",
    "PipelineParams",
    "PipelineReport",
    "annotate_functional_grasp",
    "build_category_model",
    "functional_annotation",
    "random_scene_config",
    "generate_scene",
    "run_pipeline",
    "run_scene",
    "run_batch",
    "summarize",
    "dump_summary",
    "hand_boxes",
    "pose_error",
    "is_success",
]

log = logging.getLogger(__name__)

REPORT_VERSION = "1.0"
STAGES = (
    "pose_refinement",
    "shape_registration",
    "grasp_sampling",
    "handover",
    "view_pose",
    "inhand_observation",
    "inhand_refinement",
    "evaluation",
)


# annotation -----------------------------------------------------------------------


def annotate_functional_grasp(model: ShapeSpaceModel, pose: RigidTransform) -> ShapeSpaceModel:
    """Copy of ``model`` whose metadata carries the functional grasp (canonical frame)."""
    meta = dict(model.metadata)
    meta["functional_grasp"] = pose.to_dict()
    return replace(model, metadata=meta)


def build_category_model(category, n_train=8, seed=0, latent_dim=None) -> ShapeSpaceModel:
    """Shape space trained on ``n_train`` random instances of a built-in
    category, annotated with the category's functional grasp."""
    canonical, grasp, _ = category_instance(category)
    rng = np.random.default_rng(seed)
    train = [category_instance(category, rng)[0] for _ in range(n_train)]
    model = train_shape_space(canonical, train, latent_dim=latent_dim, metadata={"category": category})
    return annotate_functional_grasp(model, grasp)


def functional_annotation(model: ShapeSpaceModel) -> RigidTransform:
    try:
        return RigidTransform.from_dict(model.metadata["functional_grasp"])
    except KeyError as exc:
        raise ConfigError("shape space model has no functional grasp annotation") from exc


# scene ------------------------------------------------------------------------------


@dataclass
class SceneConfig:
    """Everything needed to synthesize one scene; all lengths in meters, angles in radians."""

    category: str
    latent: list | None = None  # in units of each component's training std
    mesh_path: str | None = None  # alternative to ``latent``; object frame mesh
    object_position: list = field(default_factory=lambda: [0.45, 0.1])  # x, y on the table top
    object_yaw: float = 0.0
    table_min: list = field(default_factory=lambda: [0.3, -0.6, -0.05])
    table_max: list = field(default_factory=lambda: [1.1, 0.6, 0.0])
    camera: dict = field(default_factory=dict)  # PinholeCamera fields; empty = defaults
    camera_pose: dict | None = None  # None = the robot's sensor
    depth_sigma: float = 0.0
    pose_trans_sigma: float = 0.0
    pose_rot_sigma: float = 0.0
    disturbance_translation: float = 0.0  # magnitude; direction random
    disturbance_rotation: float = 0.0  # magnitude; axis random
    disturbance_mode: str = "fixed"  # "fixed" magnitudes or "gaussian" sigmas
    success_translation: float = 0.010  # success needs the final error below both
    success_rotation: float = math.radians(5.0)
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        for k in ("depth_sigma", "pose_trans_sigma", "pose_rot_sigma", "disturbance_translation", "disturbance_rotation"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.success_translation <= 0 or self.success_rotation <= 0:
            raise ConfigError("success thresholds must be positive")
        if self.disturbance_mode not in ("fixed", "gaussian"):
            raise ConfigError("disturbance_mode must be 'fixed' or 'gaussian'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scene config: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Scene:
    config: SceneConfig
    observed: PointCloud
    noisy_pose: RigidTransform
    object_pose: RigidTransform  # ground truth
    instance: TriangleMesh  # object frame
    functional_grasp: RigidTransform  # ground truth, object frame
    camera: PinholeCamera
    camera_pose: RigidTransform
    world: CollisionWorld
    table: TriangleMesh


def random_scene_config(category, seed, model: ShapeSpaceModel | None = None, **overrides) -> SceneConfig:
    """Scene with a random instance and placement drawn from ``seed``."""
    rng = np.random.default_rng([seed, 1])
    big_l = model.latent_dim if model is not None else 3
    cfg = dict(
        category=category,
        latent=np.clip(rng.normal(size=big_l), -2.0, 2.0).round(6).tolist(),
        object_position=[round(float(rng.uniform(0.40, 0.50)), 6), round(float(rng.uniform(0.0, 0.15)), 6)],
        object_yaw=round(float(rng.uniform(-0.4, 0.4)), 6),
        seed=int(seed),
        name=f"{category}_{seed:04d}",
    )
    cfg.update(overrides)
    return SceneConfig(**cfg)


@lru_cache(maxsize=8)
def _table_field(tmin, tmax, origin=(-0.4, -1.0, -0.3), resolution=0.02, dims=(101, 101, 76)):
    occ = np.zeros(dims, dtype=bool)
    voxelize_box(occ, np.asarray(origin), resolution, tmin, tmax)
    return build_edt(occ, origin, resolution)


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _noisy_cloud(meshes, camera, camera_pose, sigma, rng, keep_ids):
    depth, ids = render_labels(meshes, camera, camera_pose)
    sel = np.isin(ids, keep_ids) & (depth > 0)
    r, c = np.nonzero(sel)
    z = depth[r, c]
    if sigma > 0:
        z = z + rng.normal(0.0, sigma, size=z.shape)
    pts = np.stack([(c - camera.cx) / camera.fx * z, (r - camera.cy) / camera.fy * z, z], axis=1)
    return PointCloud(camera_pose.apply(pts))


def generate_scene(config: SceneConfig, model: ShapeSpaceModel, robot: DualArmModel) -> Scene:
    """Place the instance on the table and produce the oracle perception outputs."""
    rng_render, rng_pose = _streams(config.seed, 2)
    annotation = functional_annotation(model)
    if config.mesh_path:
        try:
            instance = read_mesh(config.mesh_path)
        except OSError as exc:
            raise ConfigError(f"cannot read instance mesh: {exc}") from exc
        latent = LatentDescriptor(np.zeros(model.latent_dim))
        if len(instance.vertices) != len(model.canonical.vertices):
            raise ConfigError("instance mesh must share the canonical connectivity")
        # ground-truth grasp for a loaded mesh: warp through its exact field
        grasp = warp_pose(_field_model(model, instance), latent, annotation)
    else:
        z = np.zeros(model.latent_dim) if config.latent is None else np.asarray(config.latent, dtype=np.float64)
        if z.shape != (model.latent_dim,):
            raise ConfigError(f"latent must have {model.latent_dim} entries")
        latent = LatentDescriptor(z * model.sigma)
        instance = decode(model, latent)
        grasp = warp_pose(model, latent, annotation)

    yaw = RigidTransform.from_rotvec([0.0, 0.0, config.object_yaw])
    rest = float(yaw.apply(instance.vertices)[:, 2].min())
    x, y = config.object_position
    pose = RigidTransform.from_rotvec([0.0, 0.0, config.object_yaw], [x, y, config.table_max[2] - rest])

    camera = PinholeCamera(**config.camera) if config.camera else PinholeCamera()
    cam_pose = RigidTransform.from_dict(config.camera_pose) if config.camera_pose else robot.camera_pose
    if cam_pose is None:
        raise ConfigError("no sensor pose in the scene or the robot description")
    lo, hi = np.asarray(config.table_min, float), np.asarray(config.table_max, float)
    table = box_mesh((hi - lo) / 2, center=(hi + lo) / 2)
    observed = _noisy_cloud([instance.transformed(pose), table], camera, cam_pose, config.depth_sigma, rng_render, [0])

    dt = rng_pose.normal(0.0, config.pose_trans_sigma, 3) if config.pose_trans_sigma > 0 else np.zeros(3)
    dr = rng_pose.normal(0.0, config.pose_rot_sigma, 3) if config.pose_rot_sigma > 0 else np.zeros(3)
    noisy = RigidTransform.from_rotation(RigidTransform.from_rotvec(dr).rotation @ pose.rotation, pose.translation + dt)

    fld = _table_field(tuple(map(float, lo)), tuple(map(float, hi)))
    world = CollisionWorld(fld, robot_static_spheres(robot))
    return Scene(config, observed, noisy, pose, instance, grasp, camera, cam_pose, world, table)


def _field_model(model, instance):
    """Model whose mean field is exactly the given instance's displacement."""
    disp = instance.vertices - model.canonical.vertices
    from .shape_space import DeformationField

    zero = np.zeros((model.basis.shape[0], model.latent_dim))
    return ShapeSpaceModel(model.canonical, DeformationField(disp), zero, np.zeros(model.latent_dim), model.metadata)


# pipeline ---------------------------------------------------------------------------


@dataclass
class PipelineParams:
    supportive_side: str = "left"
    refine: bool = True
    icp: IcpParams = field(default_factory=lambda: IcpParams(max_correspondence_dist=0.1, damping=1e-3))
    max_cloud_points: int = 3000
    gripper: GripperParams = field(default_factory=GripperParams)
    n_grasp_samples: int = 500
    min_separation: float = 0.01
    quality_floor: float = 0.5
    min_count: int = 10
    pregrasp_offset: float = 0.10
    object_spheres: int = 16  # spheres covering the held object for collision checks
    object_cover_samples: int = 2000
    sampling: SamplingParams = field(default_factory=SamplingParams)
    early_stop: bool = True
    cost: CostParams = field(default_factory=CostParams)
    ik: IkParams = field(default_factory=IkParams)
    view: ViewSampling = field(default_factory=ViewSampling)
    d_min: float = 0.5
    offset_D: float = 0.1
    # supportive hand proxy in the tip frame: a palm behind the fingertips
    # and two fingers closed on the grasp width
    palm_half_extents: tuple = (0.04, 0.05, 0.04)
    palm_offset: float = -0.09  # palm center along the tip z-axis
    finger_half_extents: tuple = (0.01, 0.005, 0.03)
    finger_offset: float = -0.02
    hand_filter_margin: float = 0.01
    refine_residual_gate: float = 0.008


@dataclass
class StageRecord:
    name: str
    success: bool
    time: float
    detail: dict = field(default_factory=dict)


@dataclass
class PipelineReport:
    scene: str
    category: str
    seed: int
    stages: list = field(default_factory=list)
    success: bool = False
    error_translation: float | None = None  # meters
    error_rotation: float | None = None  # radians
    unrefined_error_translation: float | None = None
    unrefined_error_rotation: float | None = None
    failure_stage: str | None = None
    failure_reason: str | None = None
    warnings: list = field(default_factory=list)
    version: str = REPORT_VERSION

    def to_dict(self, include_times=True):
        d = asdict(self)
        if not include_times:
            for s in d["stages"]:
                s.pop("time", None)
        else:
            d["total_time"] = sum(s["time"] for s in d["stages"])
        return d


def hand_boxes(params: PipelineParams, width):
    """``(center, half_extents)`` of the hand proxy boxes in the tip frame."""
    fx, fy, fz = params.finger_half_extents
    y = 0.5 * width + fy
    return [
        ((0.0, 0.0, params.palm_offset), tuple(params.palm_half_extents)),
        ((0.0, -y, params.finger_offset), (fx, fy, fz)),
        ((0.0, y, params.finger_offset), (fx, fy, fz)),
    ]


def pose_error(estimate: RigidTransform, truth: RigidTransform):
    """``(translation meters, rotation radians)`` between two poses."""
    return estimate.distance_to(truth)


def is_success(estimate, truth, max_translation=0.010, max_rotation=math.radians(5.0)):
    dt, ang = pose_error(estimate, truth)
    return bool(dt < max_translation and ang < max_rotation)


def _subsample(cloud: PointCloud, n, rng):
    if len(cloud) <= n:
        return cloud
    idx = np.sort(rng.choice(len(cloud), size=n, replace=False))
    return PointCloud(cloud.points[idx])


def _disturbance(cfg: SceneConfig, rng) -> RigidTransform:
    if cfg.disturbance_mode == "gaussian":
        dt = rng.normal(0.0, cfg.disturbance_translation, 3)
        dr = rng.normal(0.0, cfg.disturbance_rotation, 3)
        return RigidTransform.from_rotvec(dr, dt)
    t = _random_unit(rng) * cfg.disturbance_translation
    axis = _random_unit(rng)
    return RigidTransform.from_axis_angle(axis, cfg.disturbance_rotation, t)


def run_pipeline(scene: Scene, models, robot: DualArmModel, params: PipelineParams | None = None) -> PipelineReport:
    """Run every stage on ``scene``; failures are recorded, never raised.

    ``models`` is the scene category's :class:`ShapeSpaceModel` or a mapping
    from category name to model.
    """
    params = params or PipelineParams()
    cfg = scene.config
    report = PipelineReport(cfg.name or f"{cfg.category}_{cfg.seed}", cfg.category, cfg.seed)
    model = models if isinstance(models, ShapeSpaceModel) else models.get(cfg.category)
    if model is None:
        report.failure_stage, report.failure_reason = "setup", f"no shape space model for category {cfg.category!r}"
        return report
    rng_icp, rng_dist, rng_obs, rng_in = _streams([cfg.seed, 7], 4)
    state = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            detail = fn() or {}
        except Exception as exc:
            # any failure, expected or not, ends the run with a tagged report
            if isinstance(exc, RegraspError):
                exc.stage = name
            report.stages.append(StageRecord(name, False, time.perf_counter() - t0, {"error": type(exc).__name__}))
            report.failure_stage, report.failure_reason = name, f"{type(exc).__name__}: {exc}"
            raise _Abort from exc
        report.stages.append(StageRecord(name, True, time.perf_counter() - t0, detail))

    sup = params.supportive_side
    fun = "right" if sup == "left" else "left"
    annotation = functional_annotation(model)

    def pose_refinement():
        cloud = _subsample(scene.observed, params.max_cloud_points, rng_icp)
        state["cloud"] = cloud
        mean_mesh = decode(model, LatentDescriptor(np.zeros(model.latent_dim)))
        res = icp_register(cloud, mean_mesh, scene.noisy_pose.inverse(), params.icp)
        state["pose"] = res.transform.inverse()
        return {"icp_rms": res.residual_rms, "icp_iterations": res.iterations}

    def shape_registration():
        reg = infer(model, state["cloud"], state["pose"])
        state["reg"] = reg
        f_obj = warp_pose(model, reg, annotation)
        state["f_obj"] = f_obj
        state["f_world"] = state["pose"] @ f_obj
        return {"fitness_rms": reg.fitness_rms, "iterations": reg.iterations, "converged": reg.converged}

    def grasp_sampling():
        mesh_w = state["reg"].deformed_mesh.transformed(state["pose"])
        state["mesh_world"] = mesh_w
        cam = PinholeCamera()
        cam_pose = top_down_camera(mesh_w, RigidTransform.identity())
        depth, mask = render_depth(mesh_w, cam, cam_pose)
        grip = replace(params.gripper, max_width=float(robot.gripper_max_width.get(sup, params.gripper.max_width)))
        hyp = sample_antipodal(depth, mask, cam, cam_pose, grip, params.n_grasp_samples, cfg.seed)
        cands = select_candidates(hyp, params.min_separation, params.quality_floor, params.min_count)
        state["candidates"] = cands
        return {"hypotheses": len(hyp), "selected": len(cands.selected), "candidates": len(cands)}

    def handover():
        kept, _ = filter_grasps(state["candidates"].grasps, robot, scene.world, sup, params.pregrasp_offset, params.ik)
        poses = [state["candidates"].grasps[i].pose() for i in kept]
        surface = state["mesh_world"].sample_surface(params.object_cover_samples, np.random.default_rng(0)).points
        center, radius = object_sphere_cover(np.vstack([state["mesh_world"].vertices, surface]), params.object_spheres)
        ctx = HandoverContext(robot, scene.world, sup, center, radius, params.ik, params.cost)
        stats = PlannerStats()
        try:
            h = plan_handover(poses, state["f_world"], ctx, sample_transforms(params.sampling), params.early_stop, stats=stats)
        finally:
            state["planner"] = stats
        state["handover"] = h
        state["q"] = poses[h.grasp_index]
        state["q_width"] = state["candidates"].grasps[kept[h.grasp_index]].width
        state["object_sphere"] = (center, radius)
        d = stats.to_dict()
        d.pop("wall_time")
        d.update(feasible_grasps=len(kept), grasp_index=h.grasp_index, sample_index=h.sample_index)
        return d

    def view_pose():
        h = state["handover"]
        q_star, f_star = h.supportive, h.functional
        req = ViewPoseRequest(f_star, f_star.rotation[:, 2], scene.camera_pose, params.d_min, params.offset_D, f_star.inverse() @ q_star)
        cf = robot.arm(fun)
        pf = fun[0].upper()
        static = SphereSet.merge([scene.world.robot_static_geometry, arm_spheres(cf, cf.home, pf)])
        world = CollisionWorld(scene.world.static, static, scene.world.clearance_margin)
        cs = robot.arm(sup)
        ps = sup[0].upper()
        center, radius = state["object_sphere"]
        held = (state["q"].inverse().apply(center), radius, _hand_links(cs, ps))
        try:
            vp = generate_view_pose(req, cs, world, params.view, held, params.ik, ps)
        except NoViewPoseFound as exc:
            # proceed open loop: the object stays at the handover pose
            report.warnings.append(f"view_pose: {exc}; continuing without in-hand refinement")
            state["s_view"], state["f_view"], state["open_loop"] = q_star, f_star, True
            return {"canonical": False, "fallback": "open_loop"}
        state["s_view"], state["f_view"], state["open_loop"] = vp.supportive_pose, vp.functional_pose, False
        return {"canonical": vp.canonical, "metric": vp.metric, "evaluated": vp.evaluated}

    def inhand_observation():
        dist = _disturbance(cfg, rng_dist)
        s_view = state["s_view"]
        # the object slipped inside the supportive hand by ``dist`` (hand frame)
        true_obj = s_view @ dist @ state["q"].inverse() @ scene.object_pose
        state["true_obj_view"] = true_obj
        state["expected_obj_view"] = s_view @ state["q"].inverse() @ state["pose"]
        proxy = [box_mesh(half, center=c, pose=s_view) for c, half in hand_boxes(params, state["q_width"])]
        meshes = [scene.instance.transformed(true_obj), *proxy]
        cloud = _noisy_cloud(meshes, scene.camera, scene.camera_pose, cfg.depth_sigma, rng_obs, list(range(len(meshes))))
        state["inhand_cloud"] = _subsample(cloud, params.max_cloud_points, rng_in)
        return {"points": len(cloud), "disturbance_translation": float(np.linalg.norm(dist.translation)), "disturbance_rotation": dist.angle}

    def inhand_refinement():
        f_view = state["f_view"]
        if not params.refine or state["open_loop"]:
            state["refined"] = f_view
            return {"applied": False}
        cub = [
            Cuboid(state["s_view"] @ RigidTransform.from_translation(c), np.asarray(half) + params.hand_filter_margin)
            for c, half in hand_boxes(params, state["q_width"])
        ]
        res = inhand_refine(
            state["expected_obj_view"],
            state["inhand_cloud"],
            state["reg"].deformed_mesh,
            cub,
            f_view,
            grasp_in_object=state["f_obj"],
            params=params.icp,
            residual_gate=params.refine_residual_gate,
        )
        state["refined"] = res.refined_grasp
        return {"applied": True, "icp_rms": res.icp.residual_rms, "points": res.observed_points, "t_view_angle": res.t_view.angle}

    def evaluation():
        truth = state["true_obj_view"] @ scene.functional_grasp
        dt, ang = pose_error(state["refined"], truth)
        udt, uang = pose_error(state["f_view"], truth)
        report.error_translation, report.error_rotation = float(dt), float(ang)
        report.unrefined_error_translation, report.unrefined_error_rotation = float(udt), float(uang)
        report.success = bool(dt < cfg.success_translation and ang < cfg.success_rotation)
        return {"success": report.success}

    steps = dict(
        pose_refinement=pose_refinement,
        shape_registration=shape_registration,
        grasp_sampling=grasp_sampling,
        handover=handover,
        view_pose=view_pose,
        inhand_observation=inhand_observation,
        inhand_refinement=inhand_refinement,
        evaluation=evaluation,
    )
    try:
        for name in STAGES:
            stage(name, steps[name])
    except _Abort:
        report.success = False
    return report


class _Abort(Exception):
    pass


# batch ------------------------------------------------------------------------------


def _round(x, nd=9):
    if isinstance(x, float):
        return round(x, nd) if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _round(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, nd) for v in x]
    if isinstance(x, (np.floating,)):
        return _round(float(x), nd)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run_scene(cfg: SceneConfig, models: dict, robot: DualArmModel, params: PipelineParams | None = None) -> PipelineReport:
    """Generate one scene and run the pipeline on it, never raising."""
    name = cfg.name or f"{cfg.category}_{cfg.seed}"
    model = models.get(cfg.category)
    if model is None:
        return PipelineReport(name, cfg.category, cfg.seed, failure_stage="setup", failure_reason=f"no shape space model for category {cfg.category!r}")
    try:
        scene = generate_scene(cfg, model, robot)
    except Exception as exc:
        return PipelineReport(name, cfg.category, cfg.seed, failure_stage="scene", failure_reason=f"{type(exc).__name__}: {exc}")
    return run_pipeline(scene, model, robot, params)


def run_batch(configs, models: dict, robot: DualArmModel, params: PipelineParams | None = None, workers: int = 1):
    """Run many scenes; returns ``(summary, reports)``.

    Scenes share nothing, so ``workers > 1`` runs them in separate processes.
    The summary holds no wall-clock times, so equal inputs give byte-identical
    JSON whatever the worker count. Reports are in the order of ``configs``.
    """
    configs = list(configs)
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_scene, cfg, models, robot, params) for cfg in configs]
            reports = [f.result() for f in futures]
    else:
        reports = [run_scene(cfg, models, robot, params) for cfg in configs]
    return summarize(reports), reports


def summarize(reports):
    per_cat = {}
    for r in reports:
        per_cat.setdefault(r.category, []).append(r)
    cats = {}
    for cat, rs in sorted(per_cat.items()):
        done = [r for r in rs if r.error_translation is not None]
        cats[cat] = {
            "scenes": len(rs),
            "success": sum(r.success for r in rs),
            "success_rate": sum(r.success for r in rs) / len(rs),
            "failures": {s: sum(r.failure_stage == s for r in rs) for s in sorted({r.failure_stage for r in rs if r.failure_stage})},
            "median_error_translation": float(np.median([r.error_translation for r in done])) if done else None,
            "median_error_rotation": float(np.median([r.error_rotation for r in done])) if done else None,
            "median_unrefined_error_translation": float(np.median([r.unrefined_error_translation for r in done])) if done else None,
            "median_unrefined_error_rotation": float(np.median([r.unrefined_error_rotation for r in done])) if done else None,
        }
    summary = {
        "version": REPORT_VERSION,
        "scenes": len(reports),
        "success": sum(r.success for r in reports),
        "categories": cats,
        "results": [r.to_dict(include_times=False) for r in reports],
    }
    return _round(summary)


def dump_summary(summary, path):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
