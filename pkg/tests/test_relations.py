import numpy as np
import pytest
from hypothesis import given, strategies as st

from scanlayout.geom import Obb, axis_angle_to_matrix, rot_z
from scanlayout.layout import FeatureGrid
from scanlayout.relations import (NODE_WIDTH, Relation, RelationConfig, SceneGraph, Support, _pool_mean,
                                  angular_bin, build_scene_graph, extract_object_layout_relations,
                                  extract_object_object_relations, pooled_object_features, projection_matrix,
                                  support_kind)

from oracles import naive_mean_pool

WALL_X0 = np.array([[0, 0, 0], [0, 4, 0], [0, 4, 3], [0, 0, 3]], float)
FLOOR = np.array([[0, 0, 0], [4, 0, 0], [4, 4, 0], [0, 4, 0]], float)


def box_at_gap(gap, z0=0.5):
    # x-min face sits ``gap`` metres in front of the x = 0 wall
    return Obb([gap + 0.25, 2.0, z0 + 0.25], np.eye(3), [0.25, 0.25, 0.25])


def front_at(deg):
    t = np.radians(deg)
    return np.array([-np.sin(t), np.cos(t), 0.0])


@pytest.mark.parametrize("gap,kind", [(0.0, Support.HORIZONTAL), (0.39, Support.HORIZONTAL),
                                      (0.41, Support.NONE)])
def test_touch_threshold(gap, kind):
    assert support_kind(box_at_gap(gap), WALL_X0, RelationConfig(tau_p=0.2)) == kind


def test_floor_contact_is_vertical_support():
    assert support_kind(box_at_gap(1.0, z0=0.0), FLOOR, RelationConfig()) == Support.VERTICAL
    assert support_kind(box_at_gap(1.0, z0=0.45), FLOOR, RelationConfig()) == Support.NONE


def test_vertical_support_wins_over_touch():
    # tilted 45 degrees: the bottom face and one side face are both within
    # 50 degrees of the floor normal and both lie on the floor
    R = axis_angle_to_matrix([1, 0, 0], np.pi / 4)
    h = 0.25 * np.sqrt(2)
    box = Obb([2, 2, h], R, [0.25, 0.25, 0.25])
    side, n_side = min((box.face(1, s) for s in (-1, 1)), key=lambda f: f[1][2])
    assert np.degrees(np.arccos(-n_side[2])) == pytest.approx(45.0)
    assert side[:, 2].min() == pytest.approx(0.0, abs=1e-12)
    assert support_kind(box, FLOOR, RelationConfig(parallel_tol_deg=50.0)) == Support.VERTICAL


def test_parallel_tolerance_gates_contact():
    tilted = Obb([0.25, 2.0, 0.75], rot_z(np.radians(20)), [0.25, 0.25, 0.25])
    assert support_kind(tilted, WALL_X0, RelationConfig(parallel_tol_deg=15)) == Support.NONE
    assert support_kind(tilted, WALL_X0, RelationConfig(parallel_tol_deg=25)) == Support.HORIZONTAL


@pytest.mark.parametrize("deg,b", [(0, 0), (29.9, 0), (30, 1), (45, 1), (179, 5), (180, 5)])
def test_angle_bins(deg, b):
    assert angular_bin(front_at(0), front_at(deg)) == b


@given(st.floats(0, 180))
def test_angle_bin_symmetric_and_in_range(deg):
    a, c = front_at(0), front_at(deg)
    assert angular_bin(a, c) == angular_bin(c, a)
    assert 0 <= angular_bin(a, c) < 6


def test_zero_front_rejected():
    with pytest.raises(ValueError):
        angular_bin([0, 0, 0], [1, 0, 0])


def test_relation_lists_cover_every_pair():
    objs = [box_at_gap(0.0, 0.0), box_at_gap(2.0, 0.0), box_at_gap(1.0, 1.0)]
    rels = extract_object_layout_relations(objs, [FLOOR, WALL_X0])
    assert [(r.source, r.target) for r in rels][:2] == [("obj0", "quad0"), ("obj0", "quad1")]
    assert len(rels) == 6
    assert rels[0].kind == Support.VERTICAL and rels[1].kind == Support.HORIZONTAL
    oo = extract_object_object_relations(objs)
    assert len(oo) == 3 and all(r.is_angle and r.kind == 0 for r in oo)


def test_relation_dict_round_trip():
    for r in (Relation("obj0", "quad1", 2), Relation("obj0", "obj1", 4, True)):
        assert Relation.from_dict(r.to_dict()) == r
    assert Relation("a", "b", 1).label == "vertical_support"
    with pytest.raises(ValueError):
        Relation.from_dict({"source": "a", "target": "b", "kind": "leaning"})


def test_relation_config_validation():
    for kw in ({"tau_p": -1}, {"parallel_tol_deg": 0}, {"bin_count": 0}, {"angle_range_deg": 0}):
        with pytest.raises(ValueError):
            RelationConfig(**kw)


# --- scene graph ------------------------------------------------------------

def test_projection_has_orthonormal_rows_and_is_seeded():
    P = projection_matrix(300, 128, seed=2)
    assert np.allclose(P @ P.T, np.eye(128), atol=1e-12)
    assert np.array_equal(P, projection_matrix(300, 128, seed=2))
    Q = projection_matrix(32, 128)
    assert np.allclose(Q.T @ Q, np.eye(32), atol=1e-12)


@pytest.mark.parametrize("shape", [(11, 9, 8), (5, 3, 20), (16, 16, 16)])
def test_mean_pool_matches_naive(shape):
    block = np.random.default_rng(0).random(shape + (2,))
    assert np.allclose(_pool_mean(block, 8), naive_mean_pool(block, 8), atol=1e-12)


def _features(seed=0):
    rng = np.random.default_rng(seed)
    return FeatureGrid(np.zeros(3), 0.1, rng.random((50, 50, 40, 5)))


def test_pooled_features_shape_and_bounds():
    fg = _features()
    v = pooled_object_features(box_at_gap(1.0, 1.0), fg)
    assert v.shape == (8 ** 3 * 5,)
    outside = Obb([10.0, 2.0, 1.0], np.eye(3), [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        pooled_object_features(outside, fg)


def test_scene_graph_structure():
    fg = _features()
    objs = [box_at_gap(1.0, 0.0), box_at_gap(2.5, 0.0)]
    rels = extract_object_layout_relations(objs, [FLOOR, WALL_X0]) + extract_object_object_relations(objs)
    g = build_scene_graph(objs, [FLOOR, WALL_X0], fg, rels)
    assert g.node_ids == ["obj0", "obj1", "quad0", "quad1"]
    assert g.node_features.shape == (4, NODE_WIDTH)
    assert g.edge_index.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3]]
    assert g.edge_is_angle.tolist() == [True, False, False, False, False]
    assert g.labels.tolist() == [0, 1, 0, 1, 0]
    again = build_scene_graph(objs, [FLOOR, WALL_X0], fg, rels)
    assert np.array_equal(again.node_features, g.node_features)


def test_scene_graph_rejects_quad_quad_edges():
    with pytest.raises(ValueError):
        SceneGraph(["quad0", "quad1"], ["quad", "quad"], np.zeros((2, NODE_WIDTH)), [[0, 1]], [False])
