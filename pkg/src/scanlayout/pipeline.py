"""Pipeline stages over scenes: layout, alignment, relations, evaluation.

Each stage reads what it needs from a :class:`~scanlayout.datagen.Scene`
and returns plain results; :func:`run_pipeline` chains them and stores the
outputs in the scene's ``prediction`` block.  Ground-truth labels for
candidate edges and quads come from greedy corner matching against the
scene's layout, the same rule the layout metric uses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .align import CadDatabase, CorrespondenceSet, compute_descriptor, estimate_pose, \
    normalized_object_occupancy, retrieve_cad
from .config import PipelineConfig
from .datagen import Scene, cad_database
from .geom import Obb, Pose9DoF, apply_pose
from .layout import (CornerSet, EdgeCandidate, FeatureGrid, LayoutGraph, QuadCandidate, classify_edges,
                     classify_quads, compute_feature_grid, enumerate_edges, find_planar_quads, nms_corners,
                     score_edges)
from .metrics import AlignmentItem, alignment_accuracy, layout_prf, match_corners
from .mpnn import (MlpModel, RelationModels, TrainConfig, predict_relations, relation_samples,
                   train_classifier, train_relations)
from .relations import Relation, SceneGraph, Support, build_scene_graph, object_id, quad_id

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage failed; ``kind`` is ``"data"`` or ``"numerical"``."""

    def __init__(self, stage: str, message: str, kind: str = "data"):
        super().__init__(message)
        self.stage = stage
        self.kind = kind


@dataclass
class LayoutModels:
    edge: MlpModel
    quad: MlpModel


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

def scene_features(scene: Scene, cfg: PipelineConfig) -> FeatureGrid:
    lay = cfg.layout
    return compute_feature_grid(scene.occupancy, tuple(int(s) for s in lay["feature_scales"]),
                                float(lay["distance_clamp"]))


def detect_corners(scene: Scene, cfg: PipelineConfig) -> CornerSet:
    return nms_corners(scene.heatmap(), cfg.layout["nms_threshold"], int(cfg.layout["nms_radius"]))


def label_edges(corners: CornerSet, candidates: list[EdgeCandidate], gt: LayoutGraph,
                radius: float) -> np.ndarray:
    m = match_corners(corners.corners, gt.corners, radius)
    gt_edges = set(gt.edges)
    return np.array([c.i in m and c.j in m and tuple(sorted((m[c.i], m[c.j]))) in gt_edges
                     for c in candidates], dtype=bool)


def label_quads(corners: CornerSet, quads: list[QuadCandidate], gt: LayoutGraph, radius: float) -> np.ndarray:
    m = match_corners(corners.corners, gt.corners, radius)
    gt_quads = {frozenset(q) for q in gt.quads}
    return np.array([all(v in m for v in q.indices) and frozenset(m[v] for v in q.indices) in gt_quads
                     for q in quads], dtype=bool)


def _dedupe_quads(quads: list[QuadCandidate]) -> list[QuadCandidate]:
    """Keep one cycle per corner set: highest score, then smallest residual, then index order."""
    best: dict[frozenset, QuadCandidate] = {}
    for q in quads:
        key = frozenset(q.indices)
        cur = best.get(key)
        rank = (-(q.score or 0.0), q.planarity_residual, q.indices)
        if cur is None or rank < (-(cur.score or 0.0), cur.planarity_residual, cur.indices):
            best[key] = q
    return sorted(best.values(), key=lambda q: q.indices)


def extract_layout(scene: Scene, cfg: PipelineConfig, models: LayoutModels | None = None,
                   features: FeatureGrid | None = None) -> LayoutGraph:
    """Corners by NMS, then accepted edges, then accepted planar quads.

    With ``layout.acceptance = "oracle"`` candidates are accepted by their
    ground-truth label instead of a classifier score.
    """
    lay = cfg.layout
    oracle = lay["acceptance"] == "oracle"
    if oracle and len(scene.layout.corners) == 0:
        raise StageError("layout", "oracle acceptance needs a ground-truth layout in the scene")
    if not oracle and models is None:
        raise StageError("layout", "layout stage needs edge and quad models (or oracle acceptance)")
    features = features if features is not None else scene_features(scene, cfg)
    corners = detect_corners(scene, cfg)
    if len(corners) < 2:
        return LayoutGraph(corners.corners, [], [], corners.scores.tolist(), [], [])
    cands = enumerate_edges(corners, features)
    radius = cfg.thresholds().corner_radius
    if oracle:
        ok = label_edges(corners, cands, scene.layout, radius)
        edges = [replace(c, score=1.0) for c, k in zip(cands, ok) if k]
    else:
        try:
            edges = classify_edges(cands, models.edge, lay["edge_threshold"])
        except ValueError as exc:
            raise StageError("layout", f"edge model: {exc}") from exc
    quads = find_planar_quads(corners, edges, lay["planarity_tol"], features)
    if oracle:
        ok = label_quads(corners, quads, scene.layout, radius)
        quads = [replace(q, score=1.0) for q, k in zip(quads, ok) if k]
    elif quads:
        try:
            quads = classify_quads(quads, models.quad, lay["quad_threshold"])
        except ValueError as exc:
            raise StageError("layout", f"quad model: {exc}") from exc
    quads = _dedupe_quads(quads)
    return LayoutGraph(corners.corners, [e.key for e in edges], [q.indices for q in quads],
                       corners.scores.tolist(), [float(e.score) for e in edges],
                       [float(q.score) for q in quads])


def _layout_samples(scene: Scene, cfg: PipelineConfig, edge_model: MlpModel | None):
    features = scene_features(scene, cfg)
    corners = detect_corners(scene, cfg)
    if len(corners) < 2:
        return None
    radius = cfg.thresholds().corner_radius
    cands = enumerate_edges(corners, features)
    ok = label_edges(corners, cands, scene.layout, radius)
    Xe = np.concatenate([np.stack([c.feature_ij for c in cands]), np.stack([c.feature_ji for c in cands])])
    ye = np.concatenate([ok, ok]).astype(np.float64)
    if edge_model is None:
        return Xe, ye, None, None
    scored = score_edges(cands, edge_model)
    keep = [c for c, k in zip(scored, ok) if k or c.score >= cfg.layout["quad_train_edge_threshold"]]
    quads = find_planar_quads(corners, keep, cfg.layout["planarity_tol"], features)
    if not quads:
        return Xe, ye, np.zeros((0, 0)), np.zeros(0)
    qok = label_quads(corners, quads, scene.layout, radius)
    Xq = np.concatenate([q.features for q in quads])
    yq = np.repeat(qok, 4).astype(np.float64)
    return Xe, ye, Xq, yq


def train_layout_models(scenes: list[Scene], cfg: PipelineConfig) -> tuple[LayoutModels, dict]:
    """Edge classifier on all corner pairs, then quad classifier on the cycles
    of edges it (or the ground truth) accepts."""
    tc = cfg.train_config()
    samples = [s for s in (_layout_samples(sc, cfg, None) for sc in scenes) if s is not None]
    if not samples:
        raise StageError("train", "no training scene produced two or more corners")
    Xe = np.concatenate([s[0] for s in samples])
    ye = np.concatenate([s[1] for s in samples])
    edge, edge_losses = train_classifier(Xe, ye, tc, "bce", 1, name="edge")
    Xq, yq = [], []
    for sc in scenes:
        s = _layout_samples(sc, cfg, edge)
        if s is not None and len(s[3]):
            Xq.append(s[2])
            yq.append(s[3])
    if not Xq:
        raise StageError("train", "no quad candidates in the training scenes")
    Xq = np.concatenate(Xq)
    yq = np.concatenate(yq)
    quad_cfg = TrainConfig(**{**tc.__dict__, "seed": tc.seed + 10})
    quad, quad_losses = train_classifier(Xq, yq, quad_cfg, "bce", 1, name="quad")
    log = {"edge": {"samples": int(len(Xe)), "positive": int(ye.sum()), "losses": edge_losses},
           "quad": {"samples": int(len(Xq)), "positive": int(yq.sum()), "losses": quad_losses}}
    return LayoutModels(edge, quad), log


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def _cad_box(pose: Pose9DoF, cad_points: np.ndarray) -> Obb:
    lo, hi = cad_points.min(axis=0), cad_points.max(axis=0)
    center = apply_pose(pose, ((lo + hi) / 2)[None])[0]
    return Obb(center, pose.rotation, np.maximum(pose.scale * (hi - lo) / 2, 1e-6))


def _scan_segment(scene: Scene, box: Obb) -> np.ndarray:
    occ = np.argwhere(scene.occupancy.values > 0)
    pts = scene.occupancy.cell_center(occ).reshape(-1, 3)
    # half a voxel inset keeps the supporting floor and wall out of the segment
    return pts[box.contains(pts, margin=-0.5 * scene.occupancy.voxel_size)]


def align_objects(scene: Scene, cfg: PipelineConfig, db: CadDatabase | None = None) -> list[dict]:
    """Pose per object from its correspondences, plus a retrieved CAD model id."""
    if len(scene.correspondences) != len(scene.objects):
        raise StageError("align", "scene needs one correspondence set per object")
    if cfg.align["retrieve"] and db is None:
        db = cad_database()
    out = []
    for k, (obj, corr) in enumerate(zip(scene.objects, scene.correspondences)):
        try:
            pose = estimate_pose(corr)
        except ValueError as exc:
            raise StageError("align", f"{object_id(k)}: {exc}", "numerical") from exc
        model_id = None
        if cfg.align["retrieve"]:
            seg = _scan_segment(scene, _cad_box(pose, corr.cad_points))
            if len(seg):
                box = _cad_box(pose, corr.cad_points)
                d = compute_descriptor(normalized_object_occupancy(seg, box))
                try:
                    model_id = retrieve_cad(d, db, obj.category if cfg.align["category_filter"] else None)
                except LookupError as exc:
                    raise StageError("align", str(exc)) from exc
        out.append({"category": obj.category, "model_id": model_id, "pose": pose.to_dict()})
    return out


def predicted_boxes(scene: Scene, objects: list[dict]) -> list[Obb]:
    return [_cad_box(Pose9DoF.from_dict(o["pose"]), c.cad_points)
            for o, c in zip(objects, scene.correspondences)]


# ---------------------------------------------------------------------------
# Relations
# ---------------------------------------------------------------------------

def ground_truth_graph(scene: Scene, cfg: PipelineConfig, features: FeatureGrid | None = None) -> SceneGraph:
    features = features if features is not None else scene_features(scene, cfg)
    quads = [scene.layout.quad_points(k) for k in range(len(scene.layout.quads))]
    return build_scene_graph(scene.obbs(), quads, features, scene.relations,
                             cfg.relations["context_margin"], int(cfg.relations["feature_seed"]))


def train_relation_models(scenes: list[Scene], cfg: PipelineConfig, val_scenes=None):
    graphs = [ground_truth_graph(s, cfg) for s in scenes]
    val = [ground_truth_graph(s, cfg) for s in val_scenes] if val_scenes else None
    rc = cfg.relation_config()
    return train_relations(graphs, cfg.train_config(), val, n_support=len(Support), n_angle=rc.bin_count)


def graph_accuracy(models: RelationModels, graphs: list[SceneGraph]) -> dict[str, tuple[int, int]]:
    """(correct, total) per head over the labelled edges of ``graphs``."""
    X, head, label = relation_samples(graphs)
    pred = predict_relations(models, X, head)
    out = {}
    for h, name in ((0, "support"), (1, "angle")):
        m = head == h
        out[name] = (int(np.sum(pred[m] == label[m])), int(m.sum()))
    return out


def predict_scene_relations(models: RelationModels, boxes: list[Obb], quads: list[np.ndarray],
                            features: FeatureGrid, cfg: PipelineConfig) -> list[Relation]:
    graph = build_scene_graph(boxes, quads, features, None, cfg.relations["context_margin"],
                              int(cfg.relations["feature_seed"]))
    graph.labels[:] = 0
    X, head, _ = relation_samples([graph])
    pred = predict_relations(models, X, head)
    return [Relation(*graph.edge_ids(k), int(p), bool(graph.edge_is_angle[k]))
            for k, p in zip(range(len(graph.edge_index)), pred)]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def alignment_items(objects: list[dict]) -> list[AlignmentItem]:
    return [AlignmentItem(o["category"], Pose9DoF.from_dict(o["pose"]), o.get("model_id")) for o in objects]


def relation_counts(scene: Scene, pred_layout: LayoutGraph, pred_relations: list[Relation],
                    radius: float) -> dict[str, list[int]]:
    """Relation accuracy on pairs whose predicted quad matches a ground-truth quad."""
    m = match_corners(pred_layout.corners, scene.layout.corners, radius)
    gt_quad_of = {frozenset(q): k for k, q in enumerate(scene.layout.quads)}
    quad_map = {}
    for k, q in enumerate(pred_layout.quads):
        if all(v in m for v in q):
            g = gt_quad_of.get(frozenset(m[v] for v in q))
            if g is not None:
                quad_map[quad_id(k)] = quad_id(g)
    gt = {(r.source, r.target): r.kind for r in scene.relations}
    counts = {"support": [0, 0], "angle": [0, 0]}
    for r in pred_relations:
        if r.is_angle:
            key, name = (r.source, r.target), "angle"
        elif r.target in quad_map:
            key, name = (r.source, quad_map[r.target]), "support"
        else:
            continue
        if key in gt:
            counts[name][1] += 1
            counts[name][0] += int(gt[key] == r.kind)
    return counts


def evaluate_prediction(scene: Scene, cfg: PipelineConfig) -> dict:
    th = cfg.thresholds()
    pred = scene.prediction
    report = {}
    if "layout" in pred:
        pl = LayoutGraph.from_dict(pred["layout"])
        report["layout"] = {k: list(v) for k, v in layout_prf(pl, scene.layout, th).counts.items()}
        if "relations" in pred:
            rels = [Relation.from_dict(r) for r in pred["relations"]]
            report["relations"] = relation_counts(scene, pl, rels, th.corner_radius)
    if "objects" in pred:
        gt_items = [AlignmentItem(o.category, o.pose, o.model_id) for o in scene.objects]
        rep = alignment_accuracy(alignment_items(pred["objects"]), gt_items, th)
        report["alignment"] = {c: list(v) for c, v in rep.counts.items()}
        hits = sum(int(pred["objects"][i].get("model_id") == scene.objects[j].model_id)
                   for i, j, _ in rep.matches)
        report["retrieval"] = [hits, len(scene.objects)]
    return report


def run_pipeline(scene: Scene, cfg: PipelineConfig, layout_models: LayoutModels | None,
                 relation_models: RelationModels | None, db: CadDatabase | None = None) -> Scene:
    """All stages on one scene; returns a copy with the ``prediction`` block filled."""
    features = scene_features(scene, cfg)
    layout = extract_layout(scene, cfg, layout_models, features)
    objects = align_objects(scene, cfg, db)
    pred = {"layout": layout.to_dict(), "objects": objects}
    if relation_models is not None:
        boxes = predicted_boxes(scene, objects)
        quads = [layout.quad_points(k) for k in range(len(layout.quads))]
        try:
            rels = predict_scene_relations(relation_models, boxes, quads, features, cfg)
        except ValueError as exc:
            raise StageError("relations", str(exc)) from exc
        pred["relations"] = [r.to_dict() for r in rels]
    out = Scene(**{**scene.__dict__, "prediction": pred})
    if len(scene.layout.corners) or scene.objects:
        pred["reports"] = evaluate_prediction(out, cfg)
    return out
