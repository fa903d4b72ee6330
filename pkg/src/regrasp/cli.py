"""Command line interface: ``regrasp <command> --help`` documents every flag.

Lengths are meters, angles radians, poses ``x y z qx qy qz qw`` (unit
quaternion, scalar last) unless a flag says otherwise. Configs and reports
are JSON; meshes OBJ or PLY; depth images PFM (meters) or 16-bit PNG
(millimeters). The robot description defaults to ``$REGRASP_ROBOT`` and then
to the bundled dual-arm model.
"""
from __future__ import annotations

import json
import logging
import math
import sys
from pathlib import Path

import click
import numpy as np

from .errors import RegraspError
from .geometry import RigidTransform

log = logging.getLogger("regrasp")

MESH_SUFFIXES = (".obj", ".ply")
MODEL_SUFFIX = ".bin"


def _pose(values) -> RigidTransform | None:
    if not values:
        return None
    x, y, z, qx, qy, qz, qw = values
    return RigidTransform([qx, qy, qz, qw], [x, y, z])


def _write_json(path, data):
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        click.echo(text, nl=False)
    else:
        _parent(path).write_text(text)


def _parent(path):
    """``path`` as a Path, with its directory created."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _robot(path):
    from .kinematics import load_robot

    return load_robot(path)


def _load_models(directory):
    """Every ``*.bin`` model in ``directory`` keyed by its category."""
    from .shape_space import load_model

    models = {}
    for p in sorted(Path(directory).glob("*" + MODEL_SUFFIX)):
        m = load_model(p)
        models[m.metadata.get("category", p.stem)] = m
    if not models:
        raise click.ClickException(f"no {MODEL_SUFFIX} shape space models in {directory}")
    return models


POSE = dict(type=float, nargs=7, default=None, metavar="X Y Z QX QY QZ QW")
ROBOT = click.option(
    "--robot",
    "robot_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Robot description JSON (default: $REGRASP_ROBOT, then the bundled model).",
)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose):
    """Functional regrasp planning for a dual-arm robot."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@main.command("make-category")
@click.argument("category", type=click.Choice(["spray_bottle", "watering_can"]))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("-n", "--count", default=8, show_default=True, help="Number of random training instances.")
@click.option("--spread", default=0.15, show_default=True, help="Relative parameter spread of the instances.")
@click.option("--seed", default=0, show_default=True, help="Random seed.")
def make_category(category, out_dir, count, spread, seed):
    """Write a canonical mesh and random instances of a built-in category."""
    from .io import write_mesh
    from .shapes import category_instance

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    canonical, grasp, _ = category_instance(category)
    write_mesh(out / "canonical.ply", canonical)
    rng = np.random.default_rng(seed)
    for i in range(count):
        write_mesh(out / f"instance_{i:03d}.ply", category_instance(category, rng, spread)[0])
    _write_json(out / "functional_grasp.json", grasp.to_dict())
    click.echo(f"wrote canonical + {count} instances to {out}")


@main.command("train-shape-space")
@click.argument("category_dir", type=click.Path(exists=True, file_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False), help="Model file to write (a .json sidecar is added).")
@click.option("--canonical", type=click.Path(exists=True, dir_okay=False), default=None, help="Canonical mesh (default: canonical.obj/.ply in the directory, else the first mesh).")
@click.option("--category", default=None, help="Category name stored in the model (default: directory name).")
@click.option("--latent-dim", type=int, default=None, help="Number of components (default: smallest explaining 95% of the variance).")
@click.option("--samples", default=400, show_default=True, help="Surface samples added to each mesh's vertices for registration.")
@click.option("--seed", default=0, show_default=True, help="Random seed for the surface samples.")
def train_cmd(category_dir, output, canonical, category, latent_dim, samples, seed):
    """Register every mesh in CATEGORY_DIR to the canonical mesh and build the PCA shape space."""
    from .io import read_mesh
    from .shape_space import save_model, train_shape_space

    d = Path(category_dir)
    meshes = sorted(p for p in d.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    if canonical is None:
        named = [p for p in meshes if p.stem == "canonical"]
        canonical = named[0] if named else (meshes[0] if meshes else None)
    if canonical is None:
        raise click.ClickException(f"no meshes in {d}")
    canonical = Path(canonical)
    training = [p for p in meshes if p.resolve() != canonical.resolve()]
    model = train_shape_space(
        read_mesh(canonical),
        [read_mesh(p) for p in training],
        latent_dim=latent_dim,
        n_samples=samples,
        seed=seed,
        metadata={"category": category or d.name, "training_meshes": [p.name for p in training]},
    )
    grasp_file = d / "functional_grasp.json"
    if grasp_file.exists():
        from .pipeline import annotate_functional_grasp

        model = annotate_functional_grasp(model, RigidTransform.from_dict(json.loads(grasp_file.read_text())))
    save_model(_parent(output), model)
    ratio = model.metadata.get("explained_variance_ratio", [])
    click.echo(f"{len(training)} instances, {model.latent_dim} components, explained variance {sum(ratio[: model.latent_dim]):.4f}")


@main.command("annotate-grasp")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--pose", required=True, help="Functional grasp on the canonical mesh, object frame, meters.", **POSE)
def annotate_cmd(model_path, pose):
    """Store the functional grasp annotation in the model's sidecar."""
    from .pipeline import annotate_functional_grasp
    from .shape_space import load_model, save_model

    model = annotate_functional_grasp(load_model(model_path), _pose(pose))
    save_model(model_path, model)
    click.echo(f"annotated {model_path}")


@main.command("register")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("cloud_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--init", "init_pose", help="Initial object pose in the cloud frame (default: centroid alignment).", **POSE)
@click.option("-o", "--output", default="-", help="Result JSON (default: stdout).")
@click.option("--mesh-out", type=click.Path(dir_okay=False), default=None, help="Write the registered mesh, cloud frame.")
@click.option("--iterations", default=80, show_default=True, help="Maximum optimizer iterations.")
def register_cmd(model_path, cloud_path, init_pose, output, mesh_out, iterations):
    """Fit shape and pose of a category model to an observed point cloud."""
    from .io import read_cloud, write_mesh
    from .pipeline import functional_annotation
    from .shape_space import InferParams, infer, load_model, warp_pose

    model = load_model(model_path)
    cloud = read_cloud(cloud_path)
    init = _pose(init_pose)
    if init is None:
        init = RigidTransform.from_translation(cloud.points.mean(axis=0) - model.canonical.center())
    res = infer(model, cloud, init_pose=init, params=InferParams(max_iterations=iterations))
    out = {
        "latent": res.latent.z.tolist(),
        "object_pose": (init @ res.latent.local_rigid).to_dict(),
        "fitness_rms": res.fitness_rms,
        "converged": res.converged,
        "iterations": res.iterations,
        "units": "m",
    }
    if "functional_grasp" in model.metadata:
        out["functional_grasp"] = (init @ warp_pose(model, res, functional_annotation(model))).to_dict()
    if mesh_out:
        write_mesh(_parent(mesh_out), res.deformed_mesh.transformed(init))
    _write_json(output, out)


@main.command("sample-grasps")
@click.argument("mesh_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--pose", help="Object pose in the world (default: identity).", **POSE)
@click.option("-o", "--output", default="-", help="Grasp JSON (default: stdout).")
@click.option("--depth-out", type=click.Path(dir_okay=False), default=None, help="Write the top-down depth image (.pfm meters or .png millimeters).")
@click.option("--samples", default=500, show_default=True, help="Edge pixels tried.")
@click.option("--max-width", default=0.085, show_default=True, help="Gripper opening, meters.")
@click.option("--friction", default=0.5, show_default=True, help="Friction coefficient.")
@click.option("--min-separation", default=0.01, show_default=True, help="Minimum horizontal distance between selected grasps, meters.")
@click.option("--quality-floor", default=0.5, show_default=True, help="Stop selecting below this quality once --min-count grasps are taken.")
@click.option("--min-count", default=10, show_default=True, help="Grasps selected regardless of quality.")
@click.option("--seed", default=0, show_default=True, help="Random seed.")
def sample_cmd(mesh_path, pose, output, depth_out, samples, max_width, friction, min_separation, quality_floor, min_count, seed):
    """Render a mesh top-down and select antipodal grasps (doubled by flipping)."""
    from .grasping import GripperParams, sample_antipodal, select_candidates
    from .io import read_mesh, write_pfm, write_png16_mm
    from .render import PinholeCamera, render_depth, top_down_camera

    pose = _pose(pose) or RigidTransform.identity()
    mesh = read_mesh(mesh_path).transformed(pose)
    cam = PinholeCamera()
    cam_pose = top_down_camera(mesh, RigidTransform.identity())
    depth, mask = render_depth(mesh, cam, cam_pose)
    if depth_out:
        (write_png16_mm if depth_out.lower().endswith(".png") else write_pfm)(_parent(depth_out), depth.depth)
    grip = GripperParams(max_width=max_width, friction_mu=friction)
    hyp = sample_antipodal(depth, mask, cam, cam_pose, grip, samples, seed)
    cands = select_candidates(hyp, min_separation, quality_floor, min_count)
    _write_json(output, {"frame": "world", "units": "m", "hypotheses": len(hyp), "selected": len(cands.selected), "grasps": [g.to_dict() for g in cands]})


@main.command("plan-handover")
@click.option("--grasps", "grasps_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Supportive grasp candidates (sample-grasps output).")
@click.option("--functional", required=True, help="Functional grasp in the world, meters.", **POSE)
@click.option("--supportive-side", type=click.Choice(["left", "right"]), default="left", show_default=True, help="Arm that picks the object first.")
@click.option("--table", nargs=6, type=float, default=(0.3, -0.6, -0.05, 1.1, 0.6, 0.0), show_default=True, metavar="XMIN YMIN ZMIN XMAX YMAX ZMAX", help="Table box, meters.")
@click.option("--samples", default=256, show_default=True, help="Transform samples per grasp.")
@click.option("--seed", default=0, show_default=True, help="Seed of the transform sequence.")
@click.option("--no-early-stop", is_flag=True, help="Search every grasp even after a cheap handover is found.")
@click.option("-o", "--output", default="-", help="Result JSON (default: stdout).")
@ROBOT
def handover_cmd(grasps_path, functional, supportive_side, table, samples, seed, no_early_stop, output, robot_path):
    """Filter supportive grasps and find the cheapest feasible handover."""
    from .collision import CollisionWorld
    from .grasping import load_grasps
    from .handover import HandoverContext, PlannerStats, SamplingParams, filter_grasps, plan_handover, robot_static_spheres, sample_transforms
    from .pipeline import _table_field

    robot = _robot(robot_path)
    world = CollisionWorld(_table_field(tuple(table[:3]), tuple(table[3:])), robot_static_spheres(robot))
    grasps = load_grasps(grasps_path)
    kept, _ = filter_grasps(grasps, robot, world, supportive_side)
    ctx = HandoverContext(robot, world, supportive_side)
    stats = PlannerStats()
    h = plan_handover([grasps[i].pose() for i in kept], _pose(functional), ctx, sample_transforms(SamplingParams(n=samples, seed=seed)), not no_early_stop, stats=stats)
    _write_json(
        output,
        {
            "supportive": h.supportive.to_dict(),
            "functional": h.functional.to_dict(),
            "joint_states": {k: v.tolist() for k, v in h.joint_states.items()},
            "cost": h.cost,
            "grasp_index": kept[h.grasp_index],
            "sample_index": h.sample_index,
            "stats": stats.to_dict(),
            "units": "m",
        },
    )


@main.command("make-scenes")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of trained .bin models.")
@click.option("-n", "--count", default=10, show_default=True, help="Scenes per category.")
@click.option("--seed", default=0, show_default=True, help="Seed of the first scene.")
@click.option("--depth-sigma", default=0.001, show_default=True, help="Depth noise std, meters.")
@click.option("--pose-trans-sigma", default=0.01, show_default=True, help="Pose estimate noise std, meters.")
@click.option("--pose-rot-sigma", default=math.radians(3.0), show_default=True, help="Pose estimate noise std, radians.")
@click.option("--disturbance-trans", default=0.02, show_default=True, help="In-hand slip translation, meters.")
@click.option("--disturbance-rot", default=math.radians(10.0), show_default=True, help="In-hand slip rotation, radians.")
def scenes_cmd(out_dir, models_dir, count, seed, depth_sigma, pose_trans_sigma, pose_rot_sigma, disturbance_trans, disturbance_rot):
    """Write random scene configs for every category with a model."""
    from .pipeline import random_scene_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cat, model in _load_models(models_dir).items():
        for s in range(seed, seed + count):
            cfg = random_scene_config(
                cat,
                s,
                model,
                depth_sigma=depth_sigma,
                pose_trans_sigma=pose_trans_sigma,
                pose_rot_sigma=pose_rot_sigma,
                disturbance_translation=disturbance_trans,
                disturbance_rotation=disturbance_rot,
            )
            _write_json(out / f"{cfg.name}.json", cfg.to_dict())
    click.echo(f"wrote scenes to {out}")


def _params(no_refine):
    from .pipeline import PipelineParams

    return PipelineParams(refine=not no_refine)


@main.command("run-pipeline")
@click.argument("scene_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of trained .bin models.")
@click.option("--report", default="-", help="Report JSON (default: stdout).")
@click.option("--no-refine", is_flag=True, help="Skip the in-hand refinement (ablation).")
@ROBOT
def run_cmd(scene_path, models_dir, report, no_refine, robot_path):
    """Run the full pipeline on one scene config; exit status 1 on failure."""
    from .pipeline import SceneConfig, run_scene

    rep = run_scene(SceneConfig.load(scene_path), _load_models(models_dir), _robot(robot_path), _params(no_refine))
    _write_json(report, rep.to_dict())
    if not rep.success:
        sys.exit(1)


@main.command("batch")
@click.argument("scenes_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of trained .bin models.")
@click.option("--summary", required=True, type=click.Path(dir_okay=False), help="Summary JSON; holds no times, so reruns are byte-identical.")
@click.option("--reports", "reports_dir", type=click.Path(file_okay=False), default=None, help="Also write each scene's full report (with times) here.")
@click.option("--workers", default=1, show_default=True, help="Scenes run in parallel processes.")
@click.option("--no-refine", is_flag=True, help="Skip the in-hand refinement (ablation).")
@ROBOT
def batch_cmd(scenes_dir, models_dir, summary, reports_dir, workers, no_refine, robot_path):
    """Run every *.json scene in SCENES_DIR, in file name order."""
    from .pipeline import SceneConfig, dump_summary, run_batch

    paths = sorted(Path(scenes_dir).glob("*.json"))
    configs = []
    for p in paths:
        cfg = SceneConfig.load(p)
        cfg.name = cfg.name or p.stem
        configs.append(cfg)
    summ, reps = run_batch(configs, _load_models(models_dir), _robot(robot_path), _params(no_refine), workers)
    dump_summary(summ, _parent(summary))
    if reports_dir:
        out = Path(reports_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in reps:
            _write_json(out / f"{r.scene}.json", r.to_dict())
    click.echo(f"{summ['success']}/{summ['scenes']} scenes succeeded")


def run():
    try:
        main(standalone_mode=True)
    except RegraspError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    run()
