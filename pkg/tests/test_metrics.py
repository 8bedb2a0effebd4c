import numpy as np
import pytest

from scanlayout.geom import Pose9DoF, axis_angle_to_matrix, rot_z
from scanlayout.layout import LayoutGraph
from scanlayout.metrics import (AlignmentItem, LayoutReport, MetricThresholds, alignment_accuracy,
                                alignment_table, layout_prf, layout_table, match_corners,
                                merge_alignment_reports, merge_layout_reports, pose_errors, rotation_error_deg)

GT_POSE = Pose9DoF([1.0, 2.0, 0.5], rot_z(0.3), [1.0, 1.0, 1.0])


def perturbed(dt=0.0, dr_deg=0.0, ds=0.0):
    return Pose9DoF(GT_POSE.translation + [dt, 0, 0],
                    GT_POSE.rotation @ axis_angle_to_matrix([0, 1, 1], np.radians(dr_deg)),
                    GT_POSE.scale * [1 + ds, 1, 1])


def accuracy(pose):
    rep = alignment_accuracy([AlignmentItem("chair", pose)], [AlignmentItem("chair", GT_POSE)])
    return rep.instance_average


def test_pose_errors_measure_each_component():
    dt, dr, ds = pose_errors(perturbed(0.1, 7.0, -0.05), GT_POSE)
    assert dt == pytest.approx(0.1)
    assert dr == pytest.approx(7.0)
    assert ds == pytest.approx(0.05)


def test_alignment_thresholds_are_inclusive_below_twenty():
    assert accuracy(perturbed(0.19, 19.0, 0.19)) == 1.0
    assert accuracy(perturbed(0.21, 0.0, 0.0)) == 0.0
    assert accuracy(perturbed(0.0, 21.0, 0.0)) == 0.0
    assert accuracy(perturbed(0.0, 0.0, 0.21)) == 0.0


def test_category_mismatch_never_matches():
    rep = alignment_accuracy([AlignmentItem("table", GT_POSE)], [AlignmentItem("chair", GT_POSE)])
    assert rep.instance_average == 0.0 and rep.matches == []


def test_matching_is_one_to_one():
    gt = [AlignmentItem("chair", GT_POSE)]
    pred = [AlignmentItem("chair", GT_POSE), AlignmentItem("chair", GT_POSE)]
    rep = alignment_accuracy(pred, gt)
    assert rep.counts["chair"] == (1, 1) and len(rep.matches) == 1


def test_class_and_instance_averages():
    gt = [AlignmentItem("a", GT_POSE), AlignmentItem("a", perturbed(3.0)), AlignmentItem("b", GT_POSE)]
    pred = [AlignmentItem("a", GT_POSE), AlignmentItem("b", GT_POSE)]
    rep = alignment_accuracy(pred, gt)
    assert rep.per_category == {"a": 0.5, "b": 1.0}
    assert rep.class_average == pytest.approx(0.75)
    assert rep.instance_average == pytest.approx(2 / 3)
    merged = merge_alignment_reports([rep, rep])
    assert merged.counts == {"a": (2, 4), "b": (2, 2)}


def test_symmetry_reduces_rotation_error():
    R = rot_z(np.pi)
    assert rotation_error_deg(R, np.eye(3)) == pytest.approx(180.0)
    assert rotation_error_deg(R, np.eye(3), symmetry=2) == pytest.approx(0.0, abs=1e-6)
    assert rotation_error_deg(rot_z(1.0), np.eye(3), symmetry=0) == pytest.approx(0.0, abs=1e-6)


def test_thresholds_must_be_positive():
    with pytest.raises(ValueError):
        MetricThresholds(corner_radius=0)


# --- layout ----------------------------------------------------------------

def square_layout(offset=(0.0, 0.0, 0.0)):
    c = np.array([[0, 0, 0], [2, 0, 0], [2, 2, 0], [0, 2, 0]], float) + offset
    return LayoutGraph(c, [(0, 1), (1, 2), (2, 3), (0, 3)], [(0, 1, 2, 3)])


def test_corner_radius_boundary():
    gt = square_layout()
    assert len(match_corners(gt.corners + [0.39, 0, 0], gt.corners, 0.40)) == 4
    assert len(match_corners(gt.corners + [0.41, 0, 0], gt.corners, 0.40)) == 0


def test_corner_matching_prefers_closest_pairs():
    gt = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    pred = np.array([[0.3, 0, 0], [0.45, 0, 0]])
    assert match_corners(pred, gt, 0.4) == {1: 1, 0: 0}


def test_ground_truth_against_itself_is_perfect():
    gt = square_layout()
    rep = layout_prf(gt, gt)
    for lvl in ("corners", "edges", "quads"):
        assert rep.precision(lvl) == 1.0 and rep.recall(lvl) == 1.0


def test_extra_and_missing_elements():
    gt = square_layout()
    pred = LayoutGraph(np.vstack([gt.corners, [[5, 5, 5]]]), [(0, 1), (1, 2), (0, 2)], [])
    rep = layout_prf(pred, gt)
    assert rep.counts["corners"] == (4, 5, 4)
    assert rep.counts["edges"] == (2, 3, 4)
    assert rep.precision("quads") == 0.0 and rep.recall("quads") == 0.0


def test_empty_conventions():
    rep = LayoutReport({"corners": (0, 0, 0), "edges": (0, 0, 3), "quads": (0, 0, 0)})
    assert rep.precision("corners") == 1.0 and rep.recall("corners") == 1.0
    assert rep.precision("edges") == 0.0 and rep.recall("edges") == 0.0


def test_layout_merge_sums_counts():
    gt = square_layout()
    merged = merge_layout_reports([layout_prf(gt, gt), layout_prf(square_layout((9, 0, 0)), gt)])
    assert merged.counts["quads"] == (1, 2, 2)


def test_tables_render_percentages():
    gt = [AlignmentItem("chair", GT_POSE)]
    text = alignment_table({"ours": alignment_accuracy(gt, gt)})
    assert "100.00" in text and "chair" in text
    ltext = layout_table({"ours": layout_prf(square_layout(), square_layout())})
    assert ltext.count("100.00") == 6
