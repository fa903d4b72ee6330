import json
import math

import numpy as np
import pytest

from regrasp.errors import ConfigError
from regrasp.geometry import MeshProximity, RigidTransform, TriangleMesh
from regrasp.io import write_mesh
from regrasp.pipeline import (
    STAGES,
    PipelineParams,
    SceneConfig,
    annotate_functional_grasp,
    dump_summary,
    functional_annotation,
    generate_scene,
    is_success,
    random_scene_config,
    run_batch,
    run_pipeline,
    run_scene,
    summarize,
)

CAT = "spray_bottle"


@pytest.fixture(scope="module")
def model(category_models):
    return category_models[CAT]


def _ray_scale(scene):
    """Per-point ratio between a depth change and the point's displacement."""
    local = scene.camera_pose.inverse().apply(scene.observed.points)
    return np.linalg.norm(local / local[:, 2:3], axis=1)


# scene generation ---------------------------------------------------------------------


def test_clean_scene_lies_on_surface(model, robot):
    scene = generate_scene(SceneConfig(CAT, seed=1), model, robot)
    assert len(scene.observed) > 100
    d = scene.instance.transformed(scene.object_pose)
    dist = MeshProximity(d).query(scene.observed.points)[1]
    assert np.max(dist) < 1e-6
    assert scene.noisy_pose.almost_equal(scene.object_pose, 1e-12, 1e-12)
    # resting on the table top
    assert d.vertices[:, 2].min() == pytest.approx(0.0, abs=1e-12)


def test_scene_is_deterministic(model, robot):
    cfg = SceneConfig(CAT, seed=4, depth_sigma=0.002, pose_trans_sigma=0.01, pose_rot_sigma=0.05)
    a, b = generate_scene(cfg, model, robot), generate_scene(cfg, model, robot)
    np.testing.assert_array_equal(a.observed.points, b.observed.points)
    np.testing.assert_array_equal(a.noisy_pose.matrix, b.noisy_pose.matrix)


def test_depth_noise_level(model, robot):
    clean = generate_scene(SceneConfig(CAT, seed=2), model, robot)
    noisy = generate_scene(SceneConfig(CAT, seed=2, depth_sigma=0.002), model, robot)
    assert len(clean.observed) == len(noisy.observed)
    dz = np.linalg.norm(noisy.observed.points - clean.observed.points, axis=1) / _ray_scale(clean)
    rms = math.sqrt(np.mean(dz**2))
    assert rms == pytest.approx(0.002, rel=0.2)


def test_pose_noise_applied(model, robot):
    scene = generate_scene(SceneConfig(CAT, seed=2, pose_trans_sigma=0.01, pose_rot_sigma=0.05), model, robot)
    dt, ang = scene.noisy_pose.distance_to(scene.object_pose)
    assert 0 < dt < 0.06 and 0 < ang < 0.3


def test_latent_length_checked(model, robot):
    with pytest.raises(ConfigError):
        generate_scene(SceneConfig(CAT, latent=[0.0] * (model.latent_dim + 1)), model, robot)


# annotation ----------------------------------------------------------------------------


def test_annotation_round_trip(model):
    pose = RigidTransform.from_axis_angle([0, 1, 0], 0.4, [0.01, 0.02, 0.1])
    out = annotate_functional_grasp(model, pose)
    assert functional_annotation(out).almost_equal(pose, 1e-12, 1e-12)
    bare = annotate_functional_grasp(model, pose)
    bare.metadata.pop("functional_grasp")
    with pytest.raises(ConfigError):
        functional_annotation(bare)


def test_loaded_canonical_keeps_annotation(model, robot, tmp_path):
    path = tmp_path / "canon.obj"
    write_mesh(path, model.canonical)
    scene = generate_scene(SceneConfig(CAT, mesh_path=str(path)), model, robot)
    assert scene.functional_grasp.almost_equal(functional_annotation(model), 1e-6, 1e-6)


def test_loaded_scaled_instance_scales_grasp(model, robot, tmp_path):
    path = tmp_path / "big.obj"
    write_mesh(path, TriangleMesh(model.canonical.vertices * 1.1, model.canonical.faces))
    scene = generate_scene(SceneConfig(CAT, mesh_path=str(path)), model, robot)
    ann = functional_annotation(model)
    np.testing.assert_allclose(scene.functional_grasp.translation, 1.1 * ann.translation, atol=1e-6)
    np.testing.assert_allclose(scene.functional_grasp.rotation, ann.rotation, atol=1e-6)


# pipeline -----------------------------------------------------------------------------


def test_clean_run_succeeds(model, robot):
    scene = generate_scene(SceneConfig(CAT, seed=3), model, robot)
    r = run_pipeline(scene, model, robot)
    assert [s.name for s in r.stages] == list(STAGES)
    assert r.success and r.failure_stage is None
    assert r.error_translation < 0.005 and r.error_rotation < math.radians(2.0)


def test_disturbance_corrected(model, robot):
    cfg = SceneConfig(CAT, seed=3, disturbance_translation=0.02, disturbance_rotation=math.radians(10))
    scene = generate_scene(cfg, model, robot)
    r = run_pipeline(scene, model, robot)
    assert r.success
    assert r.error_translation < 0.010 and r.error_rotation < math.radians(4.0)
    ablated = run_pipeline(scene, model, robot, PipelineParams(refine=False))
    assert ablated.error_rotation >= math.radians(10) - 1e-6
    assert ablated.error_translation > r.error_translation


def test_out_of_reach_fails_at_handover(model, robot):
    r = run_scene(SceneConfig(CAT, seed=3, object_position=[1.05, 0.45]), {CAT: model}, robot)
    assert not r.success
    assert r.failure_stage == "handover" and "NoHandoverFound" in r.failure_reason
    assert r.stages[-1].name == "handover" and not r.stages[-1].success


def test_missing_model_reported():
    r = run_scene(SceneConfig("watering_can"), {}, None)
    assert r.failure_stage == "setup" and not r.success


def test_success_threshold():
    a = RigidTransform.identity()
    assert is_success(a, RigidTransform.from_translation([0.009, 0, 0]))
    assert not is_success(a, RigidTransform.from_translation([0.011, 0, 0]))
    assert not is_success(a, RigidTransform.from_axis_angle([0, 0, 1], math.radians(5.1)))


# configs and summaries ----------------------------------------------------------------------------


def test_scene_config_round_trip(tmp_path, model):
    cfg = random_scene_config(CAT, 11, model, depth_sigma=0.001)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert SceneConfig.load(p) == cfg
    assert cfg.depth_sigma == 0.001 and len(cfg.latent) == model.latent_dim


@pytest.mark.parametrize(
    "bad",
    [dict(depth_sigma=-1.0), dict(success_translation=0.0), dict(disturbance_mode="odd")],
)
def test_scene_config_validation(bad):
    with pytest.raises(ConfigError):
        SceneConfig(CAT, **bad)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({"category": CAT, "colour": "red"})


def test_summary_deterministic(model, robot, tmp_path):
    cfgs = [random_scene_config(CAT, s, model, disturbance_translation=0.01) for s in range(2)]
    s1, reports = run_batch(cfgs, {CAT: model}, robot)
    s2, _ = run_batch(cfgs, {CAT: model}, robot)
    dump_summary(s1, tmp_path / "a.json")
    dump_summary(s2, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert s1["scenes"] == 2 and s1["categories"][CAT]["scenes"] == 2
    assert "time" not in json.dumps(s1)
    assert summarize(reports) == s1
