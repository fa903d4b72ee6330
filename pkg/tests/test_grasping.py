import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regrasp.geometry import RigidTransform
from regrasp.grasping import (
    GraspHypothesis,
    GripperParams,
    flip_grasp,
    load_grasps,
    sample_antipodal,
    save_grasps,
    select_candidates,
)
from regrasp.render import PinholeCamera, render_depth, top_down_camera
from regrasp.shapes import box_mesh

CAM = PinholeCamera()
DOWN = np.array([0.0, 0.0, -1.0])


def _render(half):
    box = box_mesh(half, center=(0.6, 0.0, half[2]))
    pose = top_down_camera(box, RigidTransform.identity())
    depth, mask = render_depth(box, CAM, pose)
    return depth, mask, pose, box


def _hyp(x, y, q):
    return GraspHypothesis([x, y, 0.0], [1.0, 0.0, 0.0], DOWN, 0.04, q)


# sampling ----------------------------------------------------------------------------


def test_empty_mask_gives_nothing():
    depth, mask, pose, _ = _render((0.02, 0.08, 0.02))
    mask.mask[:] = False
    assert sample_antipodal(depth, mask, CAM, pose) == []


def test_four_centimeter_box():
    depth, mask, pose, _ = _render((0.02, 0.08, 0.02))
    hyps = sample_antipodal(depth, mask, CAM, pose, GripperParams(max_width=0.085))
    assert len(hyps) > 10
    top = depth.depth[mask.mask].min()
    tol = 2.0 * top / CAM.fx  # two pixels deprojected at the top face
    across = [h for h in hyps if abs(h.axis[0]) > 0.99]
    assert len(across) > 10
    for h in across:
        assert h.width == pytest.approx(0.04, abs=tol)
    # the 16 cm span is beyond the opening
    assert not [h for h in hyps if abs(h.axis[1]) > 0.7]


def test_twelve_centimeter_box_has_no_grasp_across():
    depth, mask, pose, _ = _render((0.06, 0.15, 0.02))
    hyps = sample_antipodal(depth, mask, CAM, pose, GripperParams(max_width=0.085))
    assert not [h for h in hyps if abs(h.axis[0]) > 0.7]
    assert all(h.width <= 0.085 for h in hyps)


def test_sampled_grasps_respect_invariants():
    depth, mask, pose, _ = _render((0.02, 0.03, 0.02))
    g = GripperParams(max_width=0.05)
    for h in sample_antipodal(depth, mask, CAM, pose, g):
        assert 0 < h.width <= g.max_width
        assert abs(h.axis @ h.approach) < 1e-6
        np.testing.assert_allclose(h.approach, DOWN, atol=1e-12)
        assert 0 <= h.quality <= 1


def test_sampling_is_deterministic():
    depth, mask, pose, _ = _render((0.02, 0.05, 0.02))
    a = sample_antipodal(depth, mask, CAM, pose, n_samples=100, seed=3)
    b = sample_antipodal(depth, mask, CAM, pose, n_samples=100, seed=3)
    assert [x.to_dict() for x in a] == [x.to_dict() for x in b]


def test_bad_friction():
    depth, mask, pose, _ = _render((0.02, 0.05, 0.02))
    with pytest.raises(ValueError):
        sample_antipodal(depth, mask, CAM, pose, GripperParams(friction_mu=0.0))


# selection -----------------------------------------------------------------------------


def test_all_close_selects_one():
    rng = np.random.default_rng(0)
    hyps = [_hyp(*rng.uniform(0, 0.004, 2), q) for q in np.linspace(1.0, 0.1, 181)]
    out = select_candidates(hyps)
    assert len(out.selected) == 1 and len(out) == 2
    assert out.selected[0].quality == 1.0


def test_well_separated_all_selected():
    hyps = [_hyp(0.02 * i, 0.0, 1.0 - 0.01 * i) for i in range(25)]
    out = select_candidates(hyps, quality_floor=0.1)
    assert len(out.selected) == 25 and len(out) == 50


def test_floor_triggers_at_twelfth():
    q = [0.95 - 0.01 * i for i in range(11)] + [0.3 - 0.01 * i for i in range(10)]
    hyps = [_hyp(0.02 * i, 0.0, qi) for i, qi in enumerate(q)]
    out = select_candidates(hyps, quality_floor=0.5, min_count=10)
    assert len(out.selected) == 12 and len(out) == 24


def test_floor_waits_for_min_count():
    hyps = [_hyp(0.02 * i, 0.0, 0.4 - 0.01 * i) for i in range(15)]
    assert len(select_candidates(hyps, quality_floor=0.5).selected) == 10


def test_exhausted_returns_fewer():
    hyps = [_hyp(0.02 * i, 0.0, 0.2) for i in range(4)]
    assert len(select_candidates(hyps).selected) == 4


def test_flip_is_half_turn_about_approach():
    g = GraspHypothesis([0.1, 0.2, 0.3], [0.0, 1.0, 0.0], DOWN, 0.03, 0.8)
    f = flip_grasp(g)
    rel = g.pose().inverse() @ f.pose()
    assert rel.angle == pytest.approx(math.pi)
    np.testing.assert_allclose(rel.rotvec / np.linalg.norm(rel.rotvec), [0, 0, 1], atol=1e-9)
    assert f.width == g.width and f.quality == g.quality


hyp_lists = st.lists(
    st.tuples(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(0.0, 1.0)),
    min_size=0,
    max_size=40,
)


@given(hyp_lists, st.floats(0.0, 1.0))
def test_selection_invariants(items, floor):
    hyps = [_hyp(*t) for t in items]
    out = select_candidates(hyps, quality_floor=floor)
    sel = out.selected
    assert len(out) == 2 * len(sel)
    for a, b in itertools.combinations(sel, 2):
        assert math.hypot(*(a.center - b.center)[:2]) >= 0.01
    qs = [g.quality for g in sel]
    assert qs == sorted(qs, reverse=True)
    for g, f in zip(out.grasps[::2], out.grasps[1::2]):
        np.testing.assert_array_equal(g.center, f.center)
        np.testing.assert_array_equal(g.axis, -f.axis)
        assert g.width == f.width and g.quality == f.quality
    # nothing skipped could still fit: brute force over the greedy order
    if len(sel) < 10 or sel[-1].quality >= floor:
        for h in hyps:
            if all(h is not s for s in sel):
                assert any(math.hypot(*(h.center - s.center)[:2]) < 0.01 for s in sel)


def test_invalid_hypothesis():
    with pytest.raises(ValueError):
        GraspHypothesis([0, 0, 0], [0, 0, 1], DOWN, 0.04, 1.0)
    with pytest.raises(ValueError):
        GraspHypothesis([0, 0, 0], [1, 0, 0], DOWN, 0.0, 1.0)


def test_json_round_trip(tmp_path):
    hyps = [_hyp(0.02 * i, 0.01, 0.9) for i in range(3)]
    save_grasps(tmp_path / "g.json", select_candidates(hyps))
    back = load_grasps(tmp_path / "g.json")
    assert len(back) == 6
    np.testing.assert_array_equal(back[1].axis, [-1.0, 0.0, 0.0])
