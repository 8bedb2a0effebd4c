import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanlayout.align import (CadDatabase, CadEntry, CorrespondenceSet, DegenerateGeometryError,
                              compute_descriptor, estimate_pose, l1_distance, pool_bins, pose_residual,
                              procrustes_rotation, read_xyz, retrieve_cad, write_xyz)
from scanlayout.geom import Pose9DoF, VoxelGrid, apply_pose, random_rotation, rot_z

from oracles import geodesic_deg, horn_rotation

seeds = st.integers(0, 2**31 - 1)


def random_pose(rng):
    return Pose9DoF(rng.uniform(-3, 3, 3), random_rotation(rng), rng.uniform(0.5, 2.0, 3))


@settings(max_examples=50)
@given(seeds)
def test_procrustes_matches_quaternion_oracle(seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(20, 3))
    P = Q @ random_rotation(rng).T + rng.normal(scale=0.3, size=Q.shape)
    Pc, Qc = P - P.mean(0), Q - Q.mean(0)
    R = procrustes_rotation(Pc, Qc)
    assert np.abs(R - horn_rotation(P, Q)).max() < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_procrustes_fixes_reflections():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(10, 3))
    P = Q * [1, 1, -1]        # the best orthogonal map is a mirror
    R = procrustes_rotation(P - P.mean(0), Q - Q.mean(0))
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_procrustes_rank_deficient_is_an_error():
    Q = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    Q -= Q.mean(0)
    with pytest.raises(DegenerateGeometryError):
        procrustes_rotation(Q, Q)


@settings(max_examples=100)
@given(seeds)
def test_exact_pose_recovery(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    cad = rng.uniform(-0.5, 0.5, size=(12, 3))
    est = estimate_pose(CorrespondenceSet(apply_pose(pose, cad), cad))
    assert np.allclose(est.translation, pose.translation, atol=1e-8)
    assert np.allclose(est.rotation, pose.rotation, atol=1e-8)
    assert np.allclose(est.scale, pose.scale, atol=1e-8)


def test_weights_ignore_zero_weight_outliers():
    rng = np.random.default_rng(5)
    pose = random_pose(rng)
    cad = rng.uniform(-0.5, 0.5, size=(20, 3))
    scan = apply_pose(pose, cad)
    scan[:3] += 5.0
    w = np.ones(20)
    w[:3] = 0.0
    est = estimate_pose(CorrespondenceSet(scan, cad, w))
    assert np.allclose(est.params(), pose.params(), atol=1e-8)


def test_pose_residual_zero_on_exact_data():
    rng = np.random.default_rng(2)
    pose = random_pose(rng)
    cad = rng.normal(size=(9, 3))
    corr = CorrespondenceSet(apply_pose(pose, cad), cad)
    assert pose_residual(estimate_pose(corr), corr) < 1e-16 * 1e6


def test_coplanar_cad_points_name_the_missing_axis():
    cad = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.2, 0]], float)
    with pytest.raises(DegenerateGeometryError, match="z axis"):
        estimate_pose(CorrespondenceSet(cad, cad))


def test_too_few_points():
    cad = np.eye(3)
    with pytest.raises(DegenerateGeometryError):
        estimate_pose(CorrespondenceSet(cad, cad))


def test_correspondence_validation():
    with pytest.raises(ValueError):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((3, 3)), [0, 0, 0])


def test_noisy_rotation_error_is_small():
    rng = np.random.default_rng(11)
    errs = []
    for _ in range(200):
        pose = Pose9DoF(np.zeros(3), random_rotation(rng), np.ones(3))
        cad = rng.uniform(-0.5, 0.5, size=(64, 3))
        scan = apply_pose(pose, cad) + rng.normal(scale=0.01, size=cad.shape)
        errs.append(geodesic_deg(estimate_pose(CorrespondenceSet(scan, cad)).rotation, pose.rotation))
    assert np.quantile(errs, 0.99) < 2.0


# --- descriptors and retrieval ----------------------------------------------

def test_pool_bins_cover_every_cell_once_when_large():
    bins = pool_bins(19, 8)
    assert sorted(np.concatenate(bins).tolist()) == list(range(19))
    assert len(bins) == 8


def test_pool_bins_fill_empty_bins_when_small():
    bins = pool_bins(3, 8)
    assert all(len(b) == 1 for b in bins)
    assert [int(b[0]) for b in bins] == [0, 0, 1, 1, 1, 2, 2, 2]


def test_descriptor_is_max_pool_over_occupied_region():
    v = np.zeros((20, 20, 20))
    v[4:12, 4:12, 4:12] = 1.0          # 8^3 block maps one cell per bin
    v[4, 4, 4] = 0.0
    d = compute_descriptor(VoxelGrid(np.zeros(3), 1.0, v)).reshape(8, 8, 8)
    assert d.sum() == 511 and d[0, 0, 0] == 0.0


def test_descriptor_of_empty_grid_is_an_error():
    with pytest.raises(ValueError):
        compute_descriptor(VoxelGrid(np.zeros(3), 1.0, np.zeros((2, 2, 2))))


def _db(rng, n=6):
    entries = []
    for k in range(n):
        pts = rng.uniform(-0.5, 0.5, size=(30, 3))
        entries.append(CadEntry(f"m{k}", "a" if k % 2 else "b", pts, rng.random(512).round(0)))
    return CadDatabase(entries)


@given(seeds)
def test_retrieval_is_exhaustive_minimum(seed):
    rng = np.random.default_rng(seed)
    db = _db(rng)
    d = rng.random(512).round(0)
    got = retrieve_cad(d, db, "a")
    ref = min((l1_distance(d, e.descriptor), e.model_id) for e in db.entries if e.category == "a")[1]
    assert got == ref


def test_retrieval_tie_goes_to_smallest_id():
    d = np.zeros(512)
    db = CadDatabase([CadEntry("z", "c", np.ones((4, 3)), np.zeros(512)),
                      CadEntry("y", "c", np.ones((4, 3)), np.zeros(512))])
    assert retrieve_cad(d, db) == "y"
    with pytest.raises(LookupError):
        retrieve_cad(d, db, "missing")


def test_database_round_trip(tmp_path):
    db = _db(np.random.default_rng(0))
    db.save(tmp_path)
    back = CadDatabase.load(tmp_path)
    for a, b in zip(sorted(db.entries, key=lambda e: e.model_id), back.entries):
        assert a.model_id == b.model_id and a.category == b.category
        assert np.array_equal(a.points, b.points) and np.array_equal(a.descriptor, b.descriptor)
    with pytest.raises(FileNotFoundError):
        CadDatabase.load(tmp_path / "nowhere")


def test_duplicate_model_ids_rejected():
    e = CadEntry("x", "c", np.ones((4, 3)), np.zeros(512))
    with pytest.raises(ValueError):
        CadDatabase([e, e])


def test_xyz_round_trip_is_exact(tmp_path):
    pts = np.random.default_rng(0).normal(size=(7, 3))
    write_xyz(tmp_path / "p.xyz", pts)
    assert np.array_equal(read_xyz(tmp_path / "p.xyz"), pts)
    (tmp_path / "bad.xyz").write_text("1 2\n")
    with pytest.raises(ValueError, match="bad.xyz:1"):
        read_xyz(tmp_path / "bad.xyz")


def test_pose_with_quarter_turn_and_scale():
    cad = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * [0.4, 0.2, 0.3]
    pose = Pose9DoF([1, 2, 0], rot_z(np.pi / 2), [1.5, 0.5, 1.0])
    est = estimate_pose(CorrespondenceSet(apply_pose(pose, cad), cad))
    assert np.allclose(est.params(), pose.params(), atol=1e-9)
