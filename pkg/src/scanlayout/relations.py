"""Object/layout relations and the scene graph they are learned on.

Object-layout pairs get one of three support classes from a proximity and
parallelism test on individual box faces.  Object-object pairs get the bin
of the angle between their front vectors.  :func:`build_scene_graph`
assembles the nodes (objects and layout quads, 128-d features each) and
the object-object and object-quad edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from itertools import combinations

import numpy as np

from .align import pool_bins
from .geom import Aabb, Obb, boxes_overlap, expand_box
from .layout import FeatureGrid, QuadCandidate, plane_fit

NODE_WIDTH = 128
POOL_RES = 8
BIN_EDGE_TOL_DEG = 1e-9
BOX_WIDTH = 6          # normalized AABB min/max appended to object nodes


class Support(IntEnum):
    NONE = 0
    VERTICAL = 1
    HORIZONTAL = 2


SUPPORT_NAMES = {Support.NONE: "none", Support.VERTICAL: "vertical_support",
                 Support.HORIZONTAL: "horizontal_touch"}
_SUPPORT_BY_NAME = {v: k for k, v in SUPPORT_NAMES.items()}


@dataclass(frozen=True)
class RelationConfig:
    tau_p: float = 0.2
    parallel_tol_deg: float = 15.0
    bin_count: int = 6
    angle_range_deg: float = 180.0

    def __post_init__(self):
        if self.tau_p < 0:
            raise ValueError("tau_p must be non-negative")
        if not 0.0 < self.parallel_tol_deg < 90.0:
            raise ValueError("parallel_tol_deg must lie in (0, 90)")
        if self.bin_count < 1:
            raise ValueError("bin_count must be >= 1")
        if not self.angle_range_deg > 0:
            raise ValueError("angle_range_deg must be positive")


@dataclass(frozen=True)
class Relation:
    """``kind`` is a :class:`Support` for object-quad pairs or an angle bin
    index for object-object pairs (``is_angle`` set)."""

    source: str
    target: str
    kind: int
    is_angle: bool = False

    @property
    def label(self) -> str:
        if self.is_angle:
            return f"angle_bin:{int(self.kind)}"
        return SUPPORT_NAMES[Support(self.kind)]

    def to_dict(self) -> dict:
        return {"source": self.source, "target": self.target, "kind": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> Relation:
        kind = d["kind"]
        if kind.startswith("angle_bin:"):
            return cls(d["source"], d["target"], int(kind.split(":", 1)[1]), True)
        if kind not in _SUPPORT_BY_NAME:
            raise ValueError(f"unknown relation kind {kind!r}")
        return cls(d["source"], d["target"], int(_SUPPORT_BY_NAME[kind]))


def object_id(k: int) -> str:
    return f"obj{k}"


def quad_id(k: int) -> str:
    return f"quad{k}"


def _angle_between_deg(a, b) -> float:
    c = abs(float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(min(c, 1.0))))


def _quad_points(q) -> np.ndarray:
    return np.asarray(q.points if isinstance(q, QuadCandidate) else q, dtype=np.float64)


def support_kind(obj: Obb, quad_pts: np.ndarray, cfg: RelationConfig) -> Support:
    """Support class of one object-quad pair.

    A face is in contact when its box and the quad's box, both grown by
    ``tau_p``, overlap and its normal is within ``parallel_tol_deg`` of the
    quad normal.  The bottom face means vertical support; any side face
    means horizontal touch.  Vertical support wins when both hold.
    """
    quad_box = expand_box(Aabb.from_points(quad_pts), cfg.tau_p)
    quad_normal = plane_fit(quad_pts)[1]

    def touching(axis: int, sign: int) -> bool:
        face_pts, normal = obj.face(axis, sign)
        if _angle_between_deg(normal, quad_normal) > cfg.parallel_tol_deg:
            return False
        return boxes_overlap(expand_box(Aabb.from_points(face_pts), cfg.tau_p), quad_box)

    if touching(2, -1):
        return Support.VERTICAL
    if any(touching(axis, sign) for axis in (0, 1) for sign in (-1, 1)):
        return Support.HORIZONTAL
    return Support.NONE


def extract_object_layout_relations(objects: list[Obb], quads, cfg: RelationConfig = RelationConfig(),
                                    ) -> list[Relation]:
    """Exactly one relation for every (object, quad) pair, object-major order."""
    pts = [_quad_points(q) for q in quads]
    return [Relation(object_id(i), quad_id(k), int(support_kind(obj, p, cfg)))
            for i, obj in enumerate(objects) for k, p in enumerate(pts)]


def angular_bin(front_i, front_j, cfg: RelationConfig = RelationConfig()) -> int:
    """``floor(theta / width)`` of the unsigned angle between two fronts, capped at the last bin."""
    a = np.asarray(front_i, dtype=np.float64)
    b = np.asarray(front_j, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("front vectors must be non-zero")
    theta = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))
    width = cfg.angle_range_deg / cfg.bin_count
    # angles built from degrees land an ulp either side of a bin edge; snap
    # within BIN_EDGE_TOL_DEG so that 30 degrees opens bin 1
    return min(int(np.floor((theta + BIN_EDGE_TOL_DEG) / width)), cfg.bin_count - 1)


def extract_object_object_relations(objects: list[Obb], cfg: RelationConfig = RelationConfig(),
                                    ) -> list[Relation]:
    return [Relation(object_id(i), object_id(j), angular_bin(objects[i].front, objects[j].front, cfg), True)
            for i, j in combinations(range(len(objects)), 2)]


# ---------------------------------------------------------------------------
# Scene graph
# ---------------------------------------------------------------------------

def projection_matrix(in_width: int, out_width: int = NODE_WIDTH, seed: int = 0) -> np.ndarray:
    """Fixed ``(out, in)`` projection with orthonormal rows (or columns when ``in < out``)."""
    rng = np.random.default_rng([seed, in_width, out_width])
    A = rng.standard_normal((max(in_width, out_width), min(in_width, out_width)))
    Q, Rq = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(Rq))
    return Q.T if in_width >= out_width else Q


def _pool_mean(block: np.ndarray, res: int = POOL_RES) -> np.ndarray:
    out = block
    for axis in range(3):
        bins = pool_bins(out.shape[axis], res)
        out = np.stack([np.take(out, cells, axis=axis).mean(axis=axis) for cells in bins], axis=axis)
    return out


def pooled_object_features(box: Obb, features: FeatureGrid, margin: float = 0.0,
                           channel_scale=None) -> np.ndarray:
    """Mean-pool the feature grid over the box's world bounds to ``8^3 x C``."""
    raw = box.aabb()
    if np.any(raw.min < features.origin) or np.any(raw.max > features.upper):
        raise ValueError("object box lies outside the feature grid bounds")
    bounds = expand_box(raw, margin)
    dims = np.array(features.dims)
    lo = np.floor((bounds.min - features.origin) / features.voxel_size).astype(np.int64)
    hi = np.floor((bounds.max - features.origin) / features.voxel_size).astype(np.int64) + 1
    # context margin is cropped at the grid border
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, lo + 1, dims)
    block = features.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    if channel_scale is not None:
        block = block * np.asarray(channel_scale)
    return _pool_mean(block).reshape(-1)


@dataclass
class SceneGraph:
    """Nodes are objects then quads; ``edge_index`` rows are (source, target)
    with the object as source.  ``labels[k]`` is the class of edge ``k`` or
    -1 when unlabelled; ``edge_is_angle[k]`` marks object-object edges."""

    node_ids: list[str]
    node_kinds: list[str]
    node_features: np.ndarray
    edge_index: np.ndarray
    edge_is_angle: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64).reshape(len(self.node_ids), -1)
        self.edge_index = np.asarray(self.edge_index, dtype=np.int64).reshape(-1, 2)
        self.edge_is_angle = np.asarray(self.edge_is_angle, dtype=bool).reshape(-1)
        if self.labels is None:
            self.labels = -np.ones(len(self.edge_index), dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.node_ids)
        if len(self.edge_index) and (self.edge_index.min() < 0 or self.edge_index.max() >= n):
            raise ValueError("edge endpoints must reference existing nodes")
        if self.node_features.shape[1] != NODE_WIDTH:
            raise ValueError(f"node features must have width {NODE_WIDTH}")
        for a, b in self.edge_index:
            if self.node_kinds[a] == "quad" and self.node_kinds[b] == "quad":
                raise ValueError("quad-quad edges are not part of the scene graph")

    def labelled_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.labels >= 0)
        return idx, self.edge_is_angle[idx].astype(np.int64), self.labels[idx]

    def edge_ids(self, k: int) -> tuple[str, str]:
        a, b = self.edge_index[k]
        return self.node_ids[a], self.node_ids[b]

    def with_relations(self, relations: list[Relation]) -> SceneGraph:
        lookup = {(r.source, r.target): r.kind for r in relations}
        labels = np.array([lookup.get(self.edge_ids(k), -1) for k in range(len(self.edge_index))],
                          dtype=np.int64)
        return SceneGraph(self.node_ids, self.node_kinds, self.node_features, self.edge_index,
                          self.edge_is_angle, labels)


# distance channel spans [0, clamp] voxels; bring it to the range of the others
def _channel_scale(features: FeatureGrid) -> np.ndarray:
    scale = np.ones(features.channels)
    scale[-1] = 1.0 / features.distance_clamp
    return scale


def build_scene_graph(objects: list[Obb], quads, features: FeatureGrid,
                      relations: list[Relation] | None = None, context_margin: float = 0.2,
                      seed: int = 0) -> SceneGraph:
    """Nodes for every object and quad, edges for every object-object and
    object-quad pair.

    Object nodes pool the feature grid over the object's box (grown by
    ``context_margin`` so nearby surfaces are visible) to ``8^3`` cells,
    project the result to 122 values and append the box bounds normalized
    by the grid extent; quad nodes project the concatenated corner features
    and normalized corners to 128.  Both projections are fixed seeded
    matrices with orthonormal rows/columns.
    """
    scale = _channel_scale(features)
    node_ids, kinds, feats = [], [], []
    if objects:
        P_obj = projection_matrix(POOL_RES ** 3 * features.channels, NODE_WIDTH - BOX_WIDTH, seed)
    for i, box in enumerate(objects):
        node_ids.append(object_id(i))
        kinds.append("object")
        bounds = features.normalize(np.stack([box.aabb().min, box.aabb().max])).reshape(-1)
        feats.append(np.concatenate([P_obj @ pooled_object_features(box, features, context_margin, scale),
                                     bounds]))
    quad_pts = [_quad_points(q) for q in quads]
    if quad_pts:
        P_quad = projection_matrix(4 * (features.channels + 3), NODE_WIDTH, seed + 1)
    for k, pts in enumerate(quad_pts):
        node_ids.append(quad_id(k))
        kinds.append("quad")
        f = np.concatenate([(features.at(pts) * scale).reshape(-1), features.normalize(pts).reshape(-1)])
        feats.append(P_quad @ f)
    n_obj = len(objects)
    edges, is_angle = [], []
    for i, j in combinations(range(n_obj), 2):
        edges.append((i, j))
        is_angle.append(True)
    for i in range(n_obj):
        for k in range(len(quad_pts)):
            edges.append((i, n_obj + k))
            is_angle.append(False)
    graph = SceneGraph(node_ids, kinds, np.array(feats).reshape(len(node_ids), NODE_WIDTH),
                       np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(is_angle, dtype=bool))
    if relations is not None:
        graph = graph.with_relations(relations)
    return graph
