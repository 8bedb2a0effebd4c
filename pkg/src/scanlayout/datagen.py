"""Deterministic synthetic rooms with complete ground truth.

A room is a box or an L-shaped prism made of axis-aligned rectangles
(floor, ceiling and wall quads).  Furniture is built from box parts in a
canonical frame (z up, front +y, bounding box centred at the origin) and
placed with a 9-DoF pose, either on the floor or against a wall.  The
ground truth covers the layout graph, object poses and boxes, support and
angle relations, per-object correspondences and the noisy corner positions
that feed the synthesized cornerness heatmap.

Partial scanning is simulated by dropping whole occupancy blocks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .align import CadDatabase, CadEntry, CorrespondenceSet, cad_descriptor
from .geom import Aabb, Obb, Pose9DoF, VoxelGrid, apply_pose, as_points, occupancy_in_grid, rot_z
from .layout import LayoutGraph
from .relations import (Relation, RelationConfig, extract_object_layout_relations,
                        extract_object_object_relations)


class PlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# CAD library
# ---------------------------------------------------------------------------

def _part(cx, cy, cz, sx, sy, sz):
    return (np.array([cx, cy, cz], float), np.array([sx, sy, sz], float))


def _legs(w, d, h, t=0.04, inset=0.02):
    xs = (-w / 2 + inset + t / 2, w / 2 - inset - t / 2)
    ys = (-d / 2 + inset + t / 2, d / 2 - inset - t / 2)
    return [_part(x, y, h / 2, t, t, h) for x in xs for y in ys]


def _model_parts() -> dict[str, tuple[str, list]]:
    """Box parts per model, ``(center, size)`` with the floor at z = 0."""
    m = {}
    m["cabinet_0"] = ("cabinet", [_part(0, 0, 0.45, 0.8, 0.45, 0.9)])
    m["cabinet_1"] = ("cabinet", [
        _part(0, -0.21, 0.45, 0.8, 0.03, 0.9), _part(-0.385, 0, 0.45, 0.03, 0.45, 0.9),
        _part(0.385, 0, 0.45, 0.03, 0.45, 0.9), _part(0, 0, 0.015, 0.8, 0.45, 0.03),
        _part(0, 0, 0.885, 0.8, 0.45, 0.03), _part(0, 0, 0.45, 0.74, 0.42, 0.02)])
    seat, leg_h = 0.05, 0.42
    m["chair_0"] = ("chair", _legs(0.46, 0.46, leg_h) + [
        _part(0, 0, leg_h + seat / 2, 0.46, 0.46, seat), _part(0, -0.21, 0.7, 0.46, 0.04, 0.5)])
    m["chair_1"] = ("chair", _legs(0.56, 0.5, leg_h) + [
        _part(0, 0, leg_h + seat / 2, 0.56, 0.5, seat), _part(0, -0.23, 0.72, 0.56, 0.04, 0.55),
        _part(-0.26, 0.02, 0.62, 0.04, 0.44, 0.04), _part(0.26, 0.02, 0.62, 0.04, 0.44, 0.04)])
    m["table_0"] = ("table", _legs(1.2, 0.8, 0.72) + [_part(0, 0, 0.74, 1.2, 0.8, 0.04)])
    m["table_1"] = ("table", [_part(0, 0, 0.74, 0.9, 0.9, 0.04), _part(0, 0, 0.37, 0.1, 0.1, 0.7),
                              _part(0, 0, 0.01, 0.6, 0.6, 0.02)])
    sh_w, sh_d, sh_h = 0.8, 0.32, 1.8
    frame = [_part(-sh_w / 2 + 0.015, 0, sh_h / 2, 0.03, sh_d, sh_h),
             _part(sh_w / 2 - 0.015, 0, sh_h / 2, 0.03, sh_d, sh_h),
             _part(0, 0, 0.015, sh_w, sh_d, 0.03), _part(0, 0, sh_h - 0.015, sh_w, sh_d, 0.03)]
    m["bookshelf_0"] = ("bookshelf", frame + [_part(0, -sh_d / 2 + 0.01, sh_h / 2, sh_w, 0.02, sh_h)]
                        + [_part(0, 0, z, sh_w - 0.06, sh_d, 0.02) for z in (0.45, 0.9, 1.35)])
    m["bookshelf_1"] = ("bookshelf", frame + [_part(0, 0, z, sh_w - 0.06, sh_d, 0.02)
                                              for z in (0.3, 0.6, 0.9, 1.2, 1.5)])
    m["sofa_0"] = ("sofa", [_part(0, 0.05, 0.2, 1.8, 0.8, 0.4), _part(0, -0.35, 0.6, 1.8, 0.2, 0.4),
                            _part(-0.85, 0.05, 0.55, 0.1, 0.8, 0.3), _part(0.85, 0.05, 0.55, 0.1, 0.8, 0.3)])
    m["sofa_1"] = ("sofa", [_part(0, 0.05, 0.22, 2.0, 0.8, 0.44), _part(0, -0.35, 0.65, 2.0, 0.2, 0.42)])
    return m


def _recentred_parts(parts):
    lo = np.min([c - s / 2 for c, s in parts], axis=0)
    hi = np.max([c + s / 2 for c, s in parts], axis=0)
    mid = (lo + hi) / 2
    return [(c - mid, s) for c, s in parts]


def sample_box_surface(center, size, spacing: float) -> np.ndarray:
    """Regular point lattice over the six faces of an axis-aligned box."""
    center = np.asarray(center, float)
    size = np.asarray(size, float)
    pts = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(int(np.ceil(size[u] / spacing)), 1) + 1
        nv = max(int(np.ceil(size[v] / spacing)), 1) + 1
        gu, gv = np.meshgrid(np.linspace(-size[u] / 2, size[u] / 2, nu),
                             np.linspace(-size[v] / 2, size[v] / 2, nv), indexing="ij")
        for sign in (-1, 1):
            p = np.zeros((gu.size, 3))
            p[:, axis] = sign * size[axis] / 2
            p[:, u] = gu.ravel()
            p[:, v] = gv.ravel()
            pts.append(p + center)
    return np.concatenate(pts)


def _sample_parts(parts, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted random surface samples over a set of box parts."""
    faces = []
    for c, s in parts:
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            for sign in (-1, 1):
                faces.append((c, s, axis, u, v, sign, s[u] * s[v]))
    areas = np.array([f[-1] for f in faces])
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    out = np.zeros((n, 3))
    for k, fi in enumerate(pick):
        c, s, axis, u, v, sign, _ = faces[fi]
        p = c.copy()
        p[axis] += sign * s[axis] / 2
        p[u] += (rng.random() - 0.5) * s[u]
        p[v] += (rng.random() - 0.5) * s[v]
        out[k] = p
    return out


@dataclass(frozen=True)
class CadModel:
    model_id: str
    category: str
    parts: tuple
    points: np.ndarray

    @property
    def half_extents(self) -> np.ndarray:
        lo = np.min([c - s / 2 for c, s in self.parts], axis=0)
        hi = np.max([c + s / 2 for c, s in self.parts], axis=0)
        return (hi - lo) / 2


CAD_SAMPLE_POINTS = 256
WALL_MOUNTABLE = ("cabinet", "bookshelf")


def cad_library(n_points: int = CAD_SAMPLE_POINTS) -> list[CadModel]:
    """The fixed CAD model pool, identical on every call."""
    out = []
    for k, (mid, (cat, parts)) in enumerate(sorted(_model_parts().items())):
        parts = _recentred_parts(parts)
        pts = _sample_parts(parts, n_points, np.random.default_rng(1000 + k))
        out.append(CadModel(mid, cat, tuple(parts), pts))
    return out


def cad_database(models: list[CadModel] | None = None) -> CadDatabase:
    models = cad_library() if models is None else models
    return CadDatabase([CadEntry(m.model_id, m.category, m.points, cad_descriptor(m.points))
                        for m in models])


CATEGORIES = tuple(sorted({m.category for m in cad_library()}))


# ---------------------------------------------------------------------------
# Scene specification and container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    room_extent_range: tuple = ((3.5, 7.0), (3.5, 7.0), (2.5, 3.0))
    wall_count_range: tuple = (4, 6)
    object_count_range: tuple = (2, 5)
    categories: tuple = CATEGORIES
    floor_fraction: float = 0.8
    wall_fraction: float = 0.5
    corner_jitter: float = 0.0
    point_noise: float = 0.0
    outlier_fraction: float = 0.0
    dropout: float = 0.0
    dropout_block: int = 4
    voxel_size: float = 0.05
    padding: int = 6
    heatmap_sigma: float = 0.15
    max_retries: int = 500

    def __post_init__(self):
        ext = tuple(tuple(float(v) for v in r) for r in self.room_extent_range)
        object.__setattr__(self, "room_extent_range", ext)
        object.__setattr__(self, "wall_count_range", tuple(int(v) for v in self.wall_count_range))
        object.__setattr__(self, "object_count_range", tuple(int(v) for v in self.object_count_range))
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(ext) != 3 or any(len(r) != 2 or r[0] > r[1] or r[0] <= 0 for r in ext):
            raise ValueError("room_extent_range needs three non-empty positive (lo, hi) ranges")
        lo, hi = self.wall_count_range
        if lo > hi or not self.wall_counts():
            raise ValueError("wall_count_range must include 4 (box) or 6 (L-shaped) walls")
        lo, hi = self.object_count_range
        if lo > hi or lo < 0:
            raise ValueError("object_count_range must be a non-empty, non-negative range")
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown or (hi > 0 and not self.categories):
            raise ValueError(f"unknown or empty categories: {sorted(unknown)}")
        for name in ("corner_jitter", "point_noise", "outlier_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        for name in ("floor_fraction", "wall_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.voxel_size > 0 or not self.heatmap_sigma > 0:
            raise ValueError("voxel_size and heatmap_sigma must be positive")
        if self.padding < 1 or self.dropout_block < 1 or self.max_retries < 1:
            raise ValueError("padding, dropout_block and max_retries must be positive")

    def wall_counts(self) -> list[int]:
        lo, hi = self.wall_count_range
        return [n for n in (4, 6) if lo <= n <= hi]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_extent_range"] = [list(r) for r in self.room_extent_range]
        d["wall_count_range"] = list(self.wall_count_range)
        d["object_count_range"] = list(self.object_count_range)
        d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SceneSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SceneObject:
    category: str
    model_id: str
    pose: Pose9DoF
    obb: Obb

    @property
    def front(self) -> np.ndarray:
        return self.obb.front

    def to_dict(self) -> dict:
        return {"category": self.category, "model_id": self.model_id, "pose": self.pose.to_dict(),
                "obb": self.obb.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> SceneObject:
        return cls(d["category"], d["model_id"], Pose9DoF.from_dict(d["pose"]), Obb.from_dict(d["obb"]))


@dataclass
class Scene:
    spec: SceneSpec
    room: dict
    occupancy: VoxelGrid
    layout: LayoutGraph
    objects: list[SceneObject]
    relations: list[Relation]
    correspondences: list[CorrespondenceSet]
    observed_corners: np.ndarray
    heatmap_sigma: float
    prediction: dict = field(default_factory=dict)

    def heatmap(self) -> VoxelGrid:
        return synthesize_heatmap(self.observed_corners, self.occupancy, self.heatmap_sigma)

    def obbs(self) -> list[Obb]:
        return [o.obb for o in self.objects]


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

def synthesize_heatmap(corners, grid: VoxelGrid, sigma: float, truncate: float = 5.0) -> VoxelGrid:
    """Max over corners of ``exp(-d^2 / 2 sigma^2)`` at every cell center.

    Each Gaussian is evaluated within ``truncate * sigma`` of its corner and
    zero beyond (below ``exp(-truncate^2 / 2)``).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    vs = grid.voxel_size
    dims = np.array(grid.dims)
    values = np.zeros(tuple(dims))
    reach = int(np.ceil(truncate * sigma / vs)) + 1
    for c in as_points(corners) if len(corners) else np.zeros((0, 3)):
        ci = np.floor((c - grid.origin) / vs).astype(np.int64)
        lo = np.clip(ci - reach, 0, dims)
        hi = np.clip(ci + reach + 1, 0, dims)
        if np.any(hi <= lo):
            continue
        axes = [grid.origin[a] + (np.arange(lo[a], hi[a]) + 0.5) * vs - c[a] for a in range(3)]
        d2 = axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > (truncate * sigma) ** 2] = 0.0
        sl = tuple(slice(lo[a], hi[a]) for a in range(3))
        values[sl] = np.maximum(values[sl], g)
    return VoxelGrid(grid.origin, vs, values)


# ---------------------------------------------------------------------------
# Rooms
# ---------------------------------------------------------------------------

def _room_geometry(rng: np.random.Generator, spec: SceneSpec) -> dict:
    (wl, wh), (dl, dh), (hl, hh) = spec.room_extent_range
    W = round(float(rng.uniform(wl, wh)), 2)
    D = round(float(rng.uniform(dl, dh)), 2)
    H = round(float(rng.uniform(hl, hh)), 2)
    walls = int(rng.choice(spec.wall_counts()))
    if walls == 4:
        poly = [(0, 0), (W, 0), (W, D), (0, D)]
        return {"shape": "box", "extents": [W, D, H], "polygon": poly, "floor_rects": [poly], "notch": None}
    a = round(float(rng.uniform(0.4, 0.65)) * W, 2)
    b = round(float(rng.uniform(0.4, 0.65)) * D, 2)
    mx, my = bool(rng.integers(2)), bool(rng.integers(2))
    poly = [(0, 0), (W, 0), (W, b), (a, b), (a, D), (0, D)]
    # the notch side of the long floor split is a T-vertex on the x = 0 wall
    rects = [[(0, 0), (W, 0), (W, b), (0, b)], [(0, b), (a, b), (a, D), (0, D)]]
    notch = [a, W, b, D]

    def mirror(p):
        x, y = p
        return (round(W - x, 10) if mx else x, round(D - y, 10) if my else y)

    poly = [mirror(p) for p in poly]
    rects = [[mirror(p) for p in r] for r in rects]
    if mx != my:
        poly = poly[::-1]
    nx = sorted(mirror((notch[0], 0))[0:1] + mirror((notch[1], 0))[0:1])
    ny = sorted([mirror((0, notch[2]))[1], mirror((0, notch[3]))[1]])
    return {"shape": "L", "extents": [W, D, H], "polygon": poly, "floor_rects": rects,
            "notch": [nx[0], nx[1], ny[0], ny[1]]}


def _room_layout(room: dict) -> tuple[LayoutGraph, list[list[np.ndarray]]]:
    H = room["extents"][2]
    quads_xyz = []
    for r in room["floor_rects"]:
        quads_xyz.append([(x, y, 0.0) for x, y in r])
    poly = room["polygon"]
    for k in range(len(poly)):
        (x0, y0), (x1, y1) = poly[k], poly[(k + 1) % len(poly)]
        quads_xyz.append([(x0, y0, 0.0), (x1, y1, 0.0), (x1, y1, H), (x0, y0, H)])
    for r in room["floor_rects"]:
        quads_xyz.append([(x, y, H) for x, y in r])
    keys: dict[tuple, int] = {}
    corners = []
    quads = []
    for q in quads_xyz:
        idx = []
        for p in q:
            key = tuple(round(float(v), 9) for v in p)
            if key not in keys:
                keys[key] = len(corners)
                corners.append(key)
            idx.append(keys[key])
        quads.append(tuple(idx))
    edges = sorted({tuple(sorted((q[k], q[(k + 1) % 4]))) for q in quads for k in range(4)})
    return LayoutGraph(np.array(corners, float), edges, quads), quads_xyz


def _walls(room: dict) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Floor segments ``(start, end, inward normal)`` of a CCW room polygon."""
    poly = [np.array(p, float) for p in room["polygon"]]
    area = sum(poly[k][0] * poly[(k + 1) % len(poly)][1] - poly[(k + 1) % len(poly)][0] * poly[k][1]
               for k in range(len(poly)))
    out = []
    for k in range(len(poly)):
        u, v = poly[k], poly[(k + 1) % len(poly)]
        d = (v - u) / np.linalg.norm(v - u)
        n = np.array([-d[1], d[0]]) if area > 0 else np.array([d[1], -d[0]])
        out.append((u, v, n))
    return out


def _footprint_inside(room: dict, lo: np.ndarray, hi: np.ndarray) -> bool:
    W, D, _ = room["extents"]
    if lo[0] < 0 or lo[1] < 0 or hi[0] > W or hi[1] > D:
        return False
    if room["notch"] is not None:
        x0, x1, y0, y1 = room["notch"]
        if lo[0] < x1 and hi[0] > x0 and lo[1] < y1 and hi[1] > y0:
            return False
    return True


# ---------------------------------------------------------------------------
# Objects
# ---------------------------------------------------------------------------

def _yaw_for_front(normal2d: np.ndarray) -> float:
    # rot_z(yaw) maps canonical +y to (-sin yaw, cos yaw)
    return float(np.arctan2(-normal2d[0], normal2d[1]))


def _place_objects(rng: np.random.Generator, spec: SceneSpec, room: dict,
                   library: list[CadModel]) -> list[SceneObject]:
    lo, hi = spec.object_count_range
    n_obj = int(rng.integers(lo, hi + 1))
    W, D, H = room["extents"]
    walls = _walls(room)
    by_cat = {c: [m for m in library if m.category == c] for c in spec.categories}
    placed: list[SceneObject] = []
    boxes: list[Aabb] = []
    clearance = 0.05
    for _ in range(n_obj):
        cat = spec.categories[int(rng.integers(len(spec.categories)))]
        model = by_cat[cat][int(rng.integers(len(by_cat[cat])))]
        on_floor = cat not in WALL_MOUNTABLE or rng.random() < spec.floor_fraction
        against_wall = (not on_floor) or rng.random() < spec.wall_fraction
        for _attempt in range(spec.max_retries):
            scale = rng.uniform(0.85, 1.15, size=3)
            half = model.half_extents * scale
            if against_wall:
                u, v, n = walls[int(rng.integers(len(walls)))]
                yaw = _yaw_for_front(n)
                length = np.linalg.norm(v - u)
                if length < 2 * half[0] + 0.02:
                    continue
                along = rng.uniform(half[0] + 0.01, length - half[0] - 0.01)
                gap = rng.uniform(0.0, 0.05)
                xy = u + (v - u) / length * along + n * (gap + half[1])
            else:
                yaw = float(rng.choice([0.0, 0.5, 1.0, 1.5]) * np.pi) if rng.random() < 0.5 \
                    else float(rng.uniform(0, 2 * np.pi))
                xy = rng.uniform([0.0, 0.0], [W, D])
            if on_floor:
                z = half[2]
            else:
                z_bottom = rng.uniform(0.6, 1.4)
                if z_bottom + 2 * half[2] > H - 0.2:
                    continue
                z = z_bottom + half[2]
            R = rot_z(yaw)
            center = np.array([xy[0], xy[1], z])
            obb = Obb(center, R, half, (1, 1))
            box = obb.aabb()
            if not _footprint_inside(room, box.min, box.max):
                continue
            grown = Aabb(box.min - clearance, box.max + clearance)
            if any(np.all(grown.min <= b.max) and np.all(b.min <= grown.max) for b in boxes):
                continue
            placed.append(SceneObject(cat, model.model_id, Pose9DoF(center, R, scale), obb))
            boxes.append(box)
            break
        else:
            raise PlacementError(f"could not place a {cat} after {spec.max_retries} attempts "
                                 f"(seed {spec.seed})")
    return placed


# ---------------------------------------------------------------------------
# Occupancy
# ---------------------------------------------------------------------------

def scene_grid(room: dict, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    vs = spec.voxel_size
    origin = -spec.padding * vs * np.ones(3)
    ext = np.array(room["extents"], float)
    dims = np.floor(ext / vs).astype(np.int64) + 1 + 2 * spec.padding
    return origin, dims


def _surface_points(quads_xyz, objects: list[SceneObject], library: dict, spacing: float) -> np.ndarray:
    pts = []
    for q in quads_xyz:
        q = np.array(q, float)
        lo, hi = q.min(axis=0), q.max(axis=0)
        pts.append(sample_box_surface((lo + hi) / 2, hi - lo, spacing))
    for obj in objects:
        model = library[obj.model_id]
        step = spacing / float(obj.pose.scale.max())
        local = np.concatenate([sample_box_surface(c, s, step) for c, s in model.parts])
        pts.append(apply_pose(obj.pose, local))
    return np.concatenate(pts)


def _drop_blocks(values: np.ndarray, fraction: float, block: int, rng: np.random.Generator) -> np.ndarray:
    if fraction <= 0:
        return values
    nb = [int(np.ceil(d / block)) for d in values.shape]
    drop = rng.random(nb) < fraction
    mask = np.repeat(np.repeat(np.repeat(drop, block, 0), block, 1), block, 2)
    mask = mask[:values.shape[0], :values.shape[1], :values.shape[2]]
    out = values.copy()
    out[mask] = 0.0
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_scene(spec: SceneSpec, rel_cfg: RelationConfig = RelationConfig()) -> Scene:
    """Build one scene; a pure function of ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    library = cad_library()
    lib = {m.model_id: m for m in library}
    room = _room_geometry(rng, spec)
    layout, quads_xyz = _room_layout(room)
    objects = _place_objects(rng, spec, room, library)

    origin, dims = scene_grid(room, spec)
    pts = _surface_points(quads_xyz, objects, lib, spec.voxel_size / 2)
    values = occupancy_in_grid(pts, origin, spec.voxel_size, dims).values
    values = _drop_blocks(values, spec.dropout, spec.dropout_block, rng)
    occupancy = VoxelGrid(origin, spec.voxel_size, values)

    observed = layout.corners + rng.normal(0.0, spec.corner_jitter, size=layout.corners.shape) \
        if spec.corner_jitter > 0 else layout.corners.copy()

    corrs = []
    for obj in objects:
        cad_pts = lib[obj.model_id].points
        scan = apply_pose(obj.pose, cad_pts)
        if spec.point_noise > 0:
            scan = scan + rng.normal(0.0, spec.point_noise, size=scan.shape)
        if spec.outlier_fraction > 0:
            k = int(round(spec.outlier_fraction * len(scan)))
            which = rng.choice(len(scan), size=k, replace=False)
            local = rng.uniform(-1.0, 1.0, size=(k, 3)) * obj.obb.half_extents
            scan[which] = local @ obj.obb.basis.T + obj.obb.center
        corrs.append(CorrespondenceSet(scan, cad_pts))

    relations = scene_relations(objects, layout, rel_cfg)
    room_meta = {k: room[k] for k in ("shape", "extents", "notch")}
    room_meta["polygon"] = [list(p) for p in room["polygon"]]
    room_meta["virtual_scan"] = "block occupancy dropout (stand-in for virtual scanning)"
    return Scene(spec, room_meta, occupancy, layout, objects, relations, corrs, observed,
                 spec.heatmap_sigma)


def scene_relations(objects: list[SceneObject], layout: LayoutGraph,
                    cfg: RelationConfig = RelationConfig()) -> list[Relation]:
    obbs = [o.obb for o in objects]
    quads = [layout.quad_points(k) for k in range(len(layout.quads))]
    return extract_object_layout_relations(obbs, quads, cfg) + extract_object_object_relations(obbs, cfg)


def verify_scene(scene: Scene, cfg: RelationConfig = RelationConfig(), tol: float = 1e-9) -> list[str]:
    """Re-derive relations, boxes and correspondences; returns a list of problems."""
    problems = []
    if scene_relations(scene.objects, scene.layout, cfg) != scene.relations:
        problems.append("relations differ from re-extraction")
    lib = {m.model_id: m for m in cad_library()}
    for k, obj in enumerate(scene.objects):
        model = lib[obj.model_id]
        box = obj.obb
        if np.abs(box.half_extents - model.half_extents * obj.pose.scale).max() > tol \
                or np.abs(box.center - obj.pose.translation).max() > tol \
                or np.abs(box.basis - obj.pose.rotation).max() > tol:
            problems.append(f"obj{k}: box disagrees with pose")
        if scene.spec.point_noise == 0 and scene.spec.outlier_fraction == 0:
            c = scene.correspondences[k]
            if np.abs(apply_pose(obj.pose, c.cad_points) - c.scan_points).max() > 1e-9:
                problems.append(f"obj{k}: pose does not map CAD points onto scan points")
    return problems


# ---------------------------------------------------------------------------
# RANSAC planes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float
    inliers: np.ndarray

    def distance(self, points) -> np.ndarray:
        return np.abs(as_points(points) @ self.normal - self.offset)


def _canonical_plane(n: np.ndarray, d: float) -> tuple[np.ndarray, float]:
    n = n / np.linalg.norm(n)
    if n[int(np.argmax(np.abs(n)))] < 0:
        n, d = -n, -d
    return n, float(d)


def ransac_planes(points, iterations: int = 200, inlier_tol: float = 0.02, min_inliers: int = 50,
                  seed: int = 0) -> list[Plane]:
    """Sequential RANSAC: extract the best-supported plane, remove its inliers, repeat.

    Planes are ``n . x = offset`` with the largest normal component
    positive, refit by least squares to their inliers.
    """
    pts = as_points(points)
    if len(pts) < 3:
        raise ValueError("RANSAC needs at least 3 points")
    if not inlier_tol > 0 or iterations < 1:
        raise ValueError("inlier_tol and iterations must be positive")
    rng = np.random.default_rng(seed)
    remaining = np.arange(len(pts))
    planes = []
    while len(remaining) >= max(3, min_inliers):
        P = pts[remaining]
        best_count, best = 0, None
        for _ in range(iterations):
            a, b, c = P[rng.choice(len(P), size=3, replace=False)]
            n = np.cross(b - a, c - a)
            if np.linalg.norm(n) < 1e-12:
                continue
            n = n / np.linalg.norm(n)
            count = int(np.sum(np.abs((P - a) @ n) <= inlier_tol))
            if count > best_count:
                best_count, best = count, (n, float(n @ a))
        if best is None or best_count < min_inliers:
            break
        n, d = best
        mask = np.abs(P @ n - d) <= inlier_tol
        c = P[mask].mean(axis=0)
        _, _, vt = np.linalg.svd(P[mask] - c)
        n_fit = vt[-1]
        refit = np.abs((P - c) @ n_fit) <= inlier_tol
        if refit.sum() >= mask.sum():
            n, d, mask = n_fit, float(n_fit @ c), refit
        n, d = _canonical_plane(n, d)
        planes.append(Plane(n, d, remaining[mask]))
        remaining = remaining[~mask]
    return planes
