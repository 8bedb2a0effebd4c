"""Hierarchical layout extraction: corners, then edges, then planar quads.

Corners come out of a cornerness heatmap by non-maximum suppression.  Every
corner pair is an edge candidate; accepted edges are searched for simple
4-cycles, and the planar ones become quad candidates.  Edge and quad
candidates are scored by small MLPs over per-corner grid features and
normalized corner coordinates, averaged over the orderings of the corners
so the score does not depend on how the candidate was labelled.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy import ndimage

from .geom import VoxelGrid, as_points
from .mpnn import MlpModel, mlp_forward, sigmoid

FEATURE_CHANNELS = 5
DEFAULT_SCALES = (3, 5, 9)
DEFAULT_DISTANCE_CLAMP = 10.0


@dataclass(frozen=True)
class FeatureGrid:
    """Per-cell feature channels on the same lattice as a scene grid.

    ``values`` has shape ``(nx, ny, nz, C)``.
    """

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray
    distance_clamp: float = DEFAULT_DISTANCE_CLAMP

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 4:
            raise ValueError("feature values must be (nx, ny, nz, C)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * np.array(self.dims, dtype=np.float64)

    def at(self, points) -> np.ndarray:
        """Features of the cell containing each point (clamped to the grid)."""
        idx = np.floor((as_points(points) - self.origin) / self.voxel_size).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.dims) - 1)
        return self.values[idx[:, 0], idx[:, 1], idx[:, 2]]

    def normalize(self, points) -> np.ndarray:
        """Map coordinates to ``[0, 1]^3`` by the grid bounds."""
        return (as_points(points) - self.origin) / (self.upper - self.origin)


def compute_feature_grid(occupancy: VoxelGrid, scales=DEFAULT_SCALES,
                         distance_clamp: float = DEFAULT_DISTANCE_CLAMP) -> FeatureGrid:
    """Hand-computed stand-in for a learned feature volume.

    Channels: occupancy, box-filtered occupancy density at each of the three
    window sizes (zero padding), and the distance in voxels to the nearest
    occupied cell clamped at ``distance_clamp``.
    """
    if len(scales) != 3:
        raise ValueError("exactly three box-filter scales are used")
    occ = (occupancy.values > 0).astype(np.float64)
    chans = [occ]
    for s in scales:
        chans.append(ndimage.uniform_filter(occ, size=int(s), mode="constant", cval=0.0))
    if occ.any():
        dist = ndimage.distance_transform_edt(occ == 0)
        dist = np.minimum(dist, distance_clamp)
    else:
        dist = np.full(occ.shape, float(distance_clamp))
    chans.append(dist)
    return FeatureGrid(occupancy.origin, occupancy.voxel_size, np.stack(chans, axis=-1),
                       float(distance_clamp))


# ---------------------------------------------------------------------------
# Corners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CornerSet:
    corners: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64).reshape(-1, 3)
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(c) != len(s):
            raise ValueError("one score per corner")
        object.__setattr__(self, "corners", c)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.corners)


def ball_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return off[(off ** 2).sum(axis=1) <= r * r]


def nms_corners(heatmap: VoxelGrid, threshold: float = 0.5, radius_voxels: int = 3) -> CornerSet:
    """Greedy non-maximum suppression on a cornerness heatmap.

    A cell is a candidate if its score reaches ``threshold`` and no cell
    within ``radius_voxels`` (Euclidean, in cells) scores higher.  Candidates
    are visited by descending score, ties in lexicographic cell order, and
    each accepted cell suppresses every later candidate within the radius.
    Returned corners are cell centers, so accepted corners are always more
    than ``radius_voxels`` cells apart.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if radius_voxels < 1:
        raise ValueError("radius must be at least one voxel")
    v = heatmap.values
    r = int(radius_voxels)
    footprint = np.zeros((2 * r + 1,) * 3, dtype=bool)
    off = ball_offsets(r) + r
    footprint[off[:, 0], off[:, 1], off[:, 2]] = True
    local_max = v >= ndimage.maximum_filter(v, footprint=footprint, mode="constant", cval=-np.inf)
    idx = np.argwhere(local_max & (v >= threshold))      # lexicographic order
    scores = v[idx[:, 0], idx[:, 1], idx[:, 2]]
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for o in order:
        p = idx[o]
        if all(((p - idx[k]) ** 2).sum() > r * r for k in kept):
            kept.append(o)
    kept_idx = idx[kept].reshape(-1, 3)
    return CornerSet(heatmap.cell_center(kept_idx).reshape(-1, 3), scores[kept])


# ---------------------------------------------------------------------------
# Edges
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeCandidate:
    """Corner pair ``i < j`` with both orderings of its feature vector."""

    i: int
    j: int
    feature_ij: np.ndarray
    feature_ji: np.ndarray
    score: float | None = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.i, self.j)


def corner_features(corners: CornerSet, features: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    pts = corners.corners
    return features.at(pts), features.normalize(pts)


def enumerate_edges(corners: CornerSet, features: FeatureGrid) -> list[EdgeCandidate]:
    """All ``|V|(|V|-1)/2`` corner pairs, features ``[F_i, F_j, N_i, N_j]``."""
    n = len(corners)
    if n < 2:
        raise ValueError(f"need at least 2 corners for edge candidates, got {n}")
    F, N = corner_features(corners, features)
    out = []
    for i, j in combinations(range(n), 2):
        out.append(EdgeCandidate(i, j,
                                 np.concatenate([F[i], F[j], N[i], N[j]]),
                                 np.concatenate([F[j], F[i], N[j], N[i]])))
    return out


def _symmetric_score(model: MlpModel, rows: list[np.ndarray]) -> float:
    # canonical row order and sorted summation make the mean independent of
    # which ordering the caller listed first
    rows = sorted(rows, key=lambda r: tuple(r))
    probs = sigmoid(mlp_forward(model, np.stack(rows))[:, 0])
    return float(np.sum(np.sort(probs)) / len(rows))


def _check_width(model: MlpModel, width: int, what: str):
    if model.in_width != width or model.out_width != 1:
        raise ValueError(f"{what} model expects input width {model.in_width} / output "
                         f"{model.out_width}; candidates have width {width} and need 1 logit")


def score_edges(candidates: list[EdgeCandidate], model: MlpModel) -> list[EdgeCandidate]:
    if not candidates:
        return []
    _check_width(model, len(candidates[0].feature_ij), "edge")
    return [replace(c, score=_symmetric_score(model, [c.feature_ij, c.feature_ji])) for c in candidates]


def classify_edges(candidates: list[EdgeCandidate], model: MlpModel,
                   threshold: float = 0.5) -> list[EdgeCandidate]:
    """Score both orderings and keep candidates whose mean probability reaches ``threshold``."""
    return [c for c in score_edges(candidates, model) if c.score >= threshold]


# ---------------------------------------------------------------------------
# Quads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadCandidate:
    indices: tuple[int, int, int, int]
    points: np.ndarray
    planarity_residual: float
    features: np.ndarray | None = None      # (4, 4*(C+3)), one row per cyclic shift
    score: float | None = None

    def edges(self) -> list[tuple[int, int]]:
        i = self.indices
        return [tuple(sorted((i[k], i[(k + 1) % 4]))) for k in range(4)]

    @property
    def normal(self) -> np.ndarray:
        return plane_fit(self.points)[1]


def plane_fit(points) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares plane: ``(centroid, unit normal, max abs residual)``."""
    pts = as_points(points)
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c)
    n = vt[-1]
    return c, n, float(np.abs((pts - c) @ n).max())


def planarity_residual(points) -> float:
    return plane_fit(points)[2]


def canonical_cycle(cycle) -> tuple[int, int, int, int]:
    """Rotate/reflect a 4-cycle so the lowest index is first and its lower neighbour second."""
    c = list(cycle)
    k = c.index(min(c))
    c = c[k:] + c[:k]
    if c[1] > c[3]:
        c = [c[0], c[3], c[2], c[1]]
    return tuple(int(v) for v in c)


def quad_feature_rows(F: np.ndarray, N: np.ndarray, cycle) -> np.ndarray:
    """Feature vectors of the four cyclic shifts ``ijkl, jkli, klij, lijk``."""
    rows = []
    for s in range(4):
        order = [cycle[(s + t) % 4] for t in range(4)]
        rows.append(np.concatenate([F[order].reshape(-1), N[order].reshape(-1)]))
    return np.stack(rows)


def four_cycles(n: int, edges) -> list[tuple[int, int, int, int]]:
    """Every simple 4-cycle of an undirected graph, once, in canonical form.

    Depth-first search from each start vertex ``s`` restricted to vertices
    above ``s``; a depth-4 path closing back on ``s`` is emitted only when
    its second vertex is below its last, which removes the reversed copy.
    """
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            continue
        if b not in adj[a]:
            adj[a].append(b)
            adj[b].append(a)
    for nb in adj:
        nb.sort()
    found = []

    def dfs(path: list[int]):
        s, last = path[0], path[-1]
        if len(path) == 4:
            if s in adj[last] and path[1] < path[3]:
                found.append(tuple(path))
            return
        for nxt in adj[last]:
            if nxt > s and nxt not in path:
                path.append(nxt)
                dfs(path)
                path.pop()

    for s in range(n):
        dfs([s])
    return found


def _edge_pairs(edges) -> list[tuple[int, int]]:
    out = []
    for e in edges:
        if isinstance(e, EdgeCandidate):
            out.append((e.i, e.j))
        else:
            a, b = e
            out.append((int(a), int(b)))
    return out


def find_planar_quads(corners: CornerSet, edges, planarity_tol: float = 0.05,
                      features: FeatureGrid | None = None) -> list[QuadCandidate]:
    """Planar simple 4-cycles of the accepted edge graph.

    ``edges`` may hold :class:`EdgeCandidate` objects or index pairs.  When
    ``features`` is given each quad also carries its four shifted feature
    rows for :func:`classify_quads`.
    """
    n = len(corners)
    pairs = _edge_pairs(edges)
    for a, b in pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"edge ({a}, {b}) references a missing corner")
    if features is not None:
        F, N = corner_features(corners, features)
    out = []
    for cyc in four_cycles(n, pairs):
        pts = corners.corners[list(cyc)]
        res = planarity_residual(pts)
        if res > planarity_tol:
            continue
        feats = quad_feature_rows(F, N, cyc) if features is not None else None
        out.append(QuadCandidate(cyc, pts, res, feats))
    return out


def score_quads(candidates: list[QuadCandidate], model: MlpModel) -> list[QuadCandidate]:
    if not candidates:
        return []
    for c in candidates:
        if c.features is None:
            raise ValueError("quad candidates carry no features; pass features to find_planar_quads")
    _check_width(model, candidates[0].features.shape[1], "quad")
    return [replace(c, score=_symmetric_score(model, list(c.features))) for c in candidates]


def classify_quads(candidates: list[QuadCandidate], model: MlpModel,
                   threshold: float = 0.5) -> list[QuadCandidate]:
    """Mean probability over the four cyclic shifts; keep those reaching ``threshold``."""
    return [c for c in score_quads(candidates, model) if c.score >= threshold]


# ---------------------------------------------------------------------------
# Layout graphs
# ---------------------------------------------------------------------------

@dataclass
class LayoutGraph:
    """Corners, undirected edges ``(i < j)`` and quads as corner-index 4-cycles."""

    corners: np.ndarray
    edges: list[tuple[int, int]] = field(default_factory=list)
    quads: list[tuple[int, int, int, int]] = field(default_factory=list)
    corner_scores: list[float] | None = None
    edge_scores: list[float] | None = None
    quad_scores: list[float] | None = None

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(-1, 3)
        self.edges = [tuple(sorted((int(a), int(b)))) for a, b in self.edges]
        self.quads = [tuple(int(v) for v in q) for q in self.quads]
        n = len(self.corners)
        for e in self.edges:
            if e[0] == e[1] or not 0 <= e[0] < n or not 0 <= e[1] < n:
                raise ValueError(f"invalid edge {e}")
        for q in self.quads:
            if len(q) != 4 or len(set(q)) != 4 or not all(0 <= v < n for v in q):
                raise ValueError(f"invalid quad {q}")

    def quad_points(self, k: int) -> np.ndarray:
        return self.corners[list(self.quads[k])]

    def quad_candidates(self) -> list[QuadCandidate]:
        return [QuadCandidate(q, self.quad_points(k), planarity_residual(self.quad_points(k)))
                for k, q in enumerate(self.quads)]

    def to_dict(self) -> dict:
        d = {"corners": self.corners.tolist(), "edges": [list(e) for e in self.edges],
             "quads": [list(q) for q in self.quads]}
        for name in ("corner_scores", "edge_scores", "quad_scores"):
            v = getattr(self, name)
            if v is not None:
                d[name] = [float(x) for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayoutGraph:
        return cls(np.array(d["corners"], dtype=np.float64).reshape(-1, 3),
                   [tuple(e) for e in d["edges"]], [tuple(q) for q in d["quads"]],
                   d.get("corner_scores"), d.get("edge_scores"), d.get("quad_scores"))


def export_quad_mesh(graph: LayoutGraph) -> str:
    """Wavefront OBJ text: one vertex per corner, one 4-gon face per quad."""
    lines = ["# layout quads", f"# {len(graph.corners)} vertices, {len(graph.quads)} faces"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in graph.corners]
    lines += ["f " + " ".join(str(v + 1) for v in q) for q in graph.quads]
    return "\n".join(lines) + "\n"
