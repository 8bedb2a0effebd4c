"""The eight acceptance criteria, each at its stated tolerance.

Every test records one pass/fail line; the lines are printed together in
the ``acceptance criteria`` section of the pytest summary.
"""
import time

import numpy as np
import pytest

from scanlayout.align import CorrespondenceSet, estimate_pose
from scanlayout.cli import main as cli_main
from scanlayout.config import load_config
from scanlayout.datagen import SceneSpec, generate_scene
from scanlayout.geom import Obb, Pose9DoF, apply_pose, axis_angle_to_matrix, random_rotation, rot_z
from scanlayout.layout import CornerSet, LayoutGraph, enumerate_edges, find_planar_quads, quad_feature_rows
from scanlayout.metrics import (AlignmentItem, alignment_accuracy, layout_prf, match_corners,
                                merge_alignment_reports, merge_layout_reports)
from scanlayout.mpnn import (init_mlp, init_relation_models, loss_and_grad, mlp_forward, mlp_gradients,
                             relation_batch_gradients, relation_samples)
from scanlayout.pipeline import (alignment_items, extract_layout, graph_accuracy, ground_truth_graph,
                                 run_pipeline, scene_features, train_layout_models, train_relation_models)
from scanlayout.relations import RelationConfig, Support, angular_bin, support_kind

from oracles import brute_force_quads, geodesic_deg, numerical_gradient


# --- 1. pose recovery ---------------------------------------------------------

def test_pose_recovery(record):
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(1000):
        pose = Pose9DoF(rng.uniform(-5, 5, 3), random_rotation(rng), rng.uniform(0.3, 3.0, 3))
        cad = rng.uniform(-0.5, 0.5, size=(8, 3))
        cases.append((pose, CorrespondenceSet(apply_pose(pose, cad), cad)))
    t0 = time.perf_counter()
    ests = [estimate_pose(c) for _, c in cases]
    elapsed = time.perf_counter() - t0
    worst = max(np.abs(e.params() - p.params()).max() for e, (p, _) in zip(ests, cases))

    # noise trials use 16 points: at 8 even rigid Procrustes has a p99 rotation
    # error just above 2 degrees for sigma = 1 cm on a 1 m cube
    errs = []
    for _ in range(1000):
        pose = Pose9DoF(rng.uniform(-5, 5, 3), random_rotation(rng), np.ones(3))
        cad = rng.uniform(-0.5, 0.5, size=(16, 3))
        scan = apply_pose(pose, cad) + rng.normal(scale=0.01, size=cad.shape)
        errs.append(geodesic_deg(estimate_pose(CorrespondenceSet(scan, cad)).rotation, pose.rotation))
    frac = float(np.mean(np.array(errs) < 2.0))
    ok = worst <= 1e-6 and elapsed < 5.0 and frac >= 0.99
    record(1, ok, f"max param error {worst:.2e}, {elapsed:.2f} s for 1000 fits; "
                  f"noisy: {100 * frac:.1f}% under 2 deg (p99 {np.quantile(errs, 0.99):.2f} deg)")
    assert ok


# --- 2. cycle detection vs brute force ----------------------------------------

def test_quads_match_brute_force(record):
    rng = np.random.default_rng(7)
    mismatches, total = 0, 0
    for _ in range(100):
        n = int(rng.integers(4, 13))
        pts = rng.uniform(0, 2, size=(n, 3))
        # a random subset sits on a random plane, the rest stay generic
        on_plane = rng.random(n) < rng.uniform(0.3, 0.9)
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        pts[on_plane] -= np.outer(pts[on_plane] @ normal - 1.0, normal)
        p = rng.uniform(0.3, 0.9)
        edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
        got = {q.indices for q in find_planar_quads(CornerSet(pts, np.ones(n)), edges, 0.05)}
        ref = brute_force_quads(pts, edges, 0.05)
        mismatches += got != ref
        total += len(ref)
    record(2, mismatches == 0, f"{mismatches} of 100 graphs differ ({total} planar quads in total)")
    assert mismatches == 0


# --- 3. gradient checks ---------------------------------------------------------

def _rel_err(a, b):
    a, b = np.concatenate([np.ravel(x) for x in a]), np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def _fd(loss, params):
    return [numerical_gradient(loss, p) for p in params]


def test_gradient_checks(record):
    cfg, _ = load_config()
    tc = cfg.train_config()
    scene = generate_scene(SceneSpec(seed=3, object_count_range=(3, 3)))
    features = scene_features(scene, cfg)
    corners = CornerSet(scene.layout.corners, np.ones(len(scene.layout.corners)))
    cands = enumerate_edges(corners, features)[:8]
    Xe = np.stack([c.feature_ij for c in cands] + [c.feature_ji for c in cands])
    ye = np.arange(len(Xe)) % 2
    F, N = features.at(corners.corners), features.normalize(corners.corners)
    Xq = np.concatenate([quad_feature_rows(F, N, q) for q in scene.layout.quads[:4]])
    yq = np.repeat([1, 0, 1, 0], 4)

    errs = {}
    for name, X, y in (("edge head", Xe, ye), ("quad head", Xq, yq)):
        model = init_mlp((X.shape[1],) + tc.hidden + (1,), 5)
        g = mlp_gradients(model, X, "bce", y)
        analytic = [v for pair in zip(g.weights, g.biases) for v in pair]
        errs[name] = _rel_err(analytic, _fd(lambda: loss_and_grad("bce", mlp_forward(model, X), y)[0],
                                            model.params()))

    graph = ground_truth_graph(scene, cfg, features)
    X, head, label = relation_samples([graph])
    sel = np.r_[np.flatnonzero(head == 0)[:6], np.flatnonzero(head == 1)[:6]]
    X, head, label = X[sel], head[sel], label[sel]
    models = init_relation_models(X.shape[1] // 2, tc)
    _, grads = relation_batch_gradients(models, X, head, label)

    def joint_loss():
        return relation_batch_gradients(models, X, head, label)[0]

    params = models.f_e.params() + models.support_head.params() + models.angle_head.params()
    k1, k2 = len(models.f_e.params()), len(models.f_e.params()) + len(models.support_head.params())
    numeric = _fd(joint_loss, params)
    errs["f_e"] = _rel_err(grads[:k1], numeric[:k1])
    errs["support head"] = _rel_err(grads[k1:k2], numeric[k1:k2])
    errs["angle head"] = _rel_err(grads[k2:], numeric[k2:])
    ok = all(e < 1e-4 for e in errs.values())
    record(3, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


# --- 4. metric boundaries -------------------------------------------------------

def test_metric_boundaries(record):
    gt = Pose9DoF([1.0, 2.0, 0.0], rot_z(0.4), [1.0, 1.0, 1.0])

    def acc(dt=0.0, dr=0.0, ds=0.0):
        pred = Pose9DoF(gt.translation + [dt, 0, 0],
                        gt.rotation @ axis_angle_to_matrix([1, 1, 0], np.radians(dr)), gt.scale * [1, 1 + ds, 1])
        return alignment_accuracy([AlignmentItem("c", pred)], [AlignmentItem("c", gt)]).instance_average

    checks = {
        "accept (19 cm, 19 deg, 19%)": acc(0.19, 19, 0.19) == 1.0,
        "reject 21 cm": acc(dt=0.21) == 0.0,
        "reject 21 deg": acc(dr=21) == 0.0,
        "reject 21%": acc(ds=0.21) == 0.0,
    }
    scene = generate_scene(SceneSpec(seed=11))
    g = scene.layout
    checks["corner 0.39 m accepted"] = len(match_corners(g.corners + [0, 0.39, 0], g.corners, 0.4)) == len(g.corners)
    checks["corner 0.41 m rejected"] = len(match_corners(g.corners + [0, 0.41, 0], g.corners, 0.4)) == 0
    rep = layout_prf(g, g)
    items = [AlignmentItem(o.category, o.pose) for o in scene.objects]
    arep = alignment_accuracy(items, items)
    checks["gt vs gt is 1.0"] = (all(rep.precision(l) == rep.recall(l) == 1.0 for l in ("corners", "edges", "quads"))
                                 and arep.instance_average == arep.class_average == 1.0
                                 and all(v == 1.0 for v in arep.per_category.values()))
    failed = [k for k, v in checks.items() if not v]
    record(4, not failed, f"{len(checks) - len(failed)}/{len(checks)} boundary checks" +
           (f"; failed: {failed}" if failed else ""))
    assert not failed


# --- 5. end-to-end soundness ----------------------------------------------------

def test_end_to_end_oracle(record):
    t0 = time.perf_counter()
    cfg, _ = load_config(None, ["layout.acceptance=oracle"])
    layout_reps, align_reps = [], []
    for seed in range(50):
        scene = generate_scene(SceneSpec(seed=5000 + seed))
        out = run_pipeline(scene, cfg, None, None)
        layout_reps.append(layout_prf(LayoutGraph.from_dict(out.prediction["layout"]), scene.layout))
        gt_items = [AlignmentItem(o.category, o.pose) for o in scene.objects]
        align_reps.append(alignment_accuracy(alignment_items(out.prediction["objects"]), gt_items))
    elapsed = time.perf_counter() - t0
    lay = merge_layout_reports(layout_reps)
    al = merge_alignment_reports(align_reps)
    P, R = lay.precision("quads"), lay.recall("quads")
    ok = P == 1.0 and R == 1.0 and al.instance_average == 1.0 and elapsed < 120
    record(5, ok, f"quad P={P:.3f} R={R:.3f}, alignment {al.instance_average:.3f} "
                  f"({sum(n for _, n in al.counts.values())} objects), {elapsed:.1f} s")
    assert ok


# --- 6. learning benchmark ------------------------------------------------------

# achieved on first run (plain SGD): quad P 0.9716, R 0.9257, support
# 0.9445; the pins sit just below those values so a regression is caught
PINNED = {"quad_precision": 0.96, "quad_recall": 0.91, "support_accuracy": 0.93}


@pytest.mark.slow
def test_learning_benchmark(record):
    t0 = time.perf_counter()
    cfg, _ = load_config()
    scenes = [generate_scene(SceneSpec(seed=s, corner_jitter=0.02, dropout=0.2)) for s in range(200)]
    train, test = scenes[:160], scenes[160:]
    layout_models, _ = train_layout_models(train, cfg)
    lay = merge_layout_reports([layout_prf(extract_layout(s, cfg, layout_models), s.layout, cfg.thresholds())
                                for s in test])
    rel_models, _ = train_relation_models(train, cfg)
    acc = graph_accuracy(rel_models, [ground_truth_graph(s, cfg) for s in test])
    elapsed = time.perf_counter() - t0
    P, R = lay.precision("quads"), lay.recall("quads")
    sup = acc["support"][0] / acc["support"][1]
    ang = acc["angle"][0] / acc["angle"][1]
    ok = R >= 0.90 and P >= 0.80 and sup >= 0.90 and elapsed < 900
    pinned = P >= PINNED["quad_precision"] and R >= PINNED["quad_recall"] and sup >= PINNED["support_accuracy"]
    record(6, ok and pinned, f"quad P={P:.4f} R={R:.4f}, support {sup:.4f} ({acc['support'][1]} pairs), "
                             f"angle {ang:.4f} (informational), {elapsed:.0f} s")
    assert ok
    assert pinned, f"below pinned regression bounds {PINNED}"


# --- 7. determinism -------------------------------------------------------------

def _cli_outputs(d):
    fast = ["--voxel-size", "0.1"]
    tiny = ["--set", "train.epochs=3", "--set", "train.hidden=[16]", "--set", "train.edge_feature_width=8"]
    s = d / "scenes"
    s0 = s / "scene_0000.json"
    codes = [
        cli_main(["gen", "--seed", "7", "--count", "3", "--out", str(s), "--cad-dir", str(d / "cad"), *fast]),
        cli_main(["train", str(s), "--out", str(d / "m.npz"), "--log", str(d / "log.json"), *tiny]),
        cli_main(["layout", str(s0), "--models", str(d / "m.npz"), "--out", str(d / "layout.json"),
                  "--obj", str(d / "layout.obj")]),
        cli_main(["align", str(s0), "--cad-dir", str(d / "cad"), "--out", str(d / "align.json")]),
        cli_main(["relations", str(d / "align.json"), "--models", str(d / "m.npz"), "--out", str(d / "rel.json")]),
        cli_main(["run", str(s0), "--models", str(d / "m.npz"), "--cad-dir", str(d / "cad"),
                  "--out", str(d / "run.json")]),
        cli_main(["eval", str(d / "run.json"), "--json", str(d / "eval.json")]),
    ]
    np.savetxt(d / "p.xyz", np.random.default_rng(0).uniform(0, 1, (300, 3)) * [1, 1, 0.01])
    codes.append(cli_main(["planes", str(d / "p.xyz"), "--out", str(d / "planes.json")]))
    files = {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
    return codes, files


def test_determinism(record, tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _cli_outputs(tmp_path / "a")
    out_a = capsys.readouterr().out.replace(str(tmp_path / "a"), "")
    codes_b, files_b = _cli_outputs(tmp_path / "b")
    out_b = capsys.readouterr().out.replace(str(tmp_path / "b"), "")
    differ = sorted(k for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    ok = codes_a == codes_b == [0] * 8 and not differ and out_a == out_b
    record(7, ok, f"8 subcommands, {len(files_a)} output files, byte-identical: {not differ}"
                  + (f"; differing: {differ}" if differ else "") + f"; exit codes {codes_a}")
    assert ok


# --- 8. relation extraction -------------------------------------------------------

def test_relation_extraction(record):
    cfg = RelationConfig(tau_p=0.2)
    wall = np.array([[0, 0, 0], [0, 4, 0], [0, 4, 3], [0, 0, 3]], float)
    floor = np.array([[0, 0, 0], [4, 0, 0], [4, 4, 0], [0, 4, 0]], float)

    def box(gap, z0=0.8):
        return Obb([gap + 0.3, 2.0, z0 + 0.3], np.eye(3), [0.3, 0.3, 0.3])

    checks = {
        "0.39 m gap is a touch": support_kind(box(0.39), wall, cfg) == Support.HORIZONTAL,
        "0.41 m gap is not": support_kind(box(0.41), wall, cfg) == Support.NONE,
    }
    # a box in the floor-wall corner touches the wall and stands on the floor
    corner_box = box(0.0, 0.0)
    checks["touching both: wall alone is a touch"] = support_kind(corner_box, wall, cfg) == Support.HORIZONTAL
    tilted = Obb([2, 2, 0.3 * np.sqrt(2)], axis_angle_to_matrix([1, 0, 0], np.pi / 4), [0.3, 0.3, 0.3])
    checks["vertical support takes precedence"] = (
        support_kind(tilted, floor, RelationConfig(tau_p=0.2, parallel_tol_deg=50)) == Support.VERTICAL)
    front = lambda deg: np.array([-np.sin(np.radians(deg)), np.cos(np.radians(deg)), 0.0])
    bins = [angular_bin(front(0), front(d)) for d in (0, 29.9, 30, 45, 179, 180)]
    checks["angle bins"] = bins == [0, 0, 1, 1, 5, 5]
    failed = [k for k, v in checks.items() if not v]
    record(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks, bins {bins}"
           + (f"; failed: {failed}" if failed else ""))
    assert not failed
