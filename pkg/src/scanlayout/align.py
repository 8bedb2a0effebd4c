"""CAD retrieval and 9-DoF alignment from dense correspondences.

Rotation comes from the orthogonal Procrustes solution (SVD of the weighted
cross-covariance with a determinant fix).  Anisotropic scale has no closed
form jointly with rotation, so :func:`estimate_pose` decouples the problem:
whiten the CAD points, solve rotation, solve per-axis scale in the CAD
frame, then refine rotation once with that scale.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Obb, Pose9DoF, VoxelGrid, as_points, occupancy_in_grid

DESCRIPTOR_RES = 8
DESCRIPTOR_LEN = DESCRIPTOR_RES ** 3
_AXES = "xyz"


class DegenerateGeometryError(ValueError):
    """Correspondences do not determine the requested transform."""


@dataclass(frozen=True)
class CorrespondenceSet:
    scan_points: np.ndarray
    cad_points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        p = as_points(self.scan_points)
        q = as_points(self.cad_points)
        if p.shape != q.shape:
            raise ValueError("scan and CAD point lists must have equal length")
        object.__setattr__(self, "scan_points", p)
        object.__setattr__(self, "cad_points", q)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(p):
                raise ValueError("one weight per correspondence")
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("weights must be non-negative and not all zero")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.scan_points)

    def weight_vector(self) -> np.ndarray:
        return np.ones(len(self)) if self.weights is None else self.weights

    def to_dict(self) -> dict:
        return {"scan": self.scan_points.tolist(), "cad": self.cad_points.tolist(),
                "weights": None if self.weights is None else self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> CorrespondenceSet:
        return cls(np.array(d["scan"], dtype=np.float64).reshape(-1, 3),
                   np.array(d["cad"], dtype=np.float64).reshape(-1, 3), d.get("weights"))


def _weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if len(w) != n or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative, not all zero, one per point")
    return w


def procrustes_rotation(P, Q, weights=None) -> np.ndarray:
    """Proper rotation ``R`` minimizing ``sum w |R q - p|^2`` for centered sets.

    Raises :class:`DegenerateGeometryError` when the cross-covariance has
    rank below 2, where the rotation is not unique.
    """
    P = as_points(P)
    Q = as_points(Q)
    if P.shape != Q.shape or len(P) < 3:
        raise ValueError("need two equally sized sets of at least 3 points")
    w = _weights(weights, len(P))
    H = (Q * w[:, None]).T @ P
    U, S, Vt = np.linalg.svd(H)
    tol = max(S[0], 1e-300) * 1e-10
    rank = int(np.sum(S > tol))
    if rank < 2:
        raise DegenerateGeometryError(f"cross-covariance has rank {rank}; rotation is undetermined")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    if d == 0:
        d = 1.0
    return V @ np.diag([1.0, 1.0, d]) @ U.T


def _scale_lsq(Pc: np.ndarray, Qc: np.ndarray, w: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Per-axis scale minimizing ``sum w |R (s*q) - p|^2`` in the CAD frame."""
    local = Pc @ R            # rows R^T p
    num = (w[:, None] * local * Qc).sum(axis=0)
    den = (w[:, None] * Qc * Qc).sum(axis=0)
    return num / den


def estimate_pose(corr: CorrespondenceSet) -> Pose9DoF:
    """9-DoF pose with ``scan ~ R (s * cad) + t``.

    The CAD points are whitened by their weighted second-moment matrix
    before Procrustes (per-axis normalization when that matrix is
    diagonal), which makes the first rotation exact on noiseless data
    whatever the scale.  Scale is then solved per CAD axis, rotation is
    re-estimated against the scaled CAD points, and scale re-solved once.
    """
    if len(corr) < 4:
        raise DegenerateGeometryError("9-DoF pose needs at least 4 correspondences")
    w = corr.weight_vector()
    wn = w / w.sum()
    cp = wn @ corr.scan_points
    cq = wn @ corr.cad_points
    Pc = corr.scan_points - cp
    Qc = corr.cad_points - cq
    C = (Qc * w[:, None]).T @ Qc
    evals, evecs = np.linalg.eigh(C)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        axis = _AXES[int(np.argmax(np.abs(evecs[:, 0])))]
        raise DegenerateGeometryError(
            f"CAD correspondences are coplanar or collinear; no spread along the {axis} axis")
    Qw = Qc @ np.linalg.inv(C)
    R = procrustes_rotation(Pc, Qw, w)
    s = _scale_lsq(Pc, Qc, w, R)
    if np.any(s <= 0):
        raise DegenerateGeometryError(
            f"non-positive scale along the {_AXES[int(np.argmin(s))]} axis")
    R = procrustes_rotation(Pc, Qc * s, w)
    s = _scale_lsq(Pc, Qc, w, R)
    if np.any(s <= 0):
        raise DegenerateGeometryError(
            f"non-positive scale along the {_AXES[int(np.argmin(s))]} axis")
    t = cp - R @ (s * cq)
    return Pose9DoF(t, R, s)


def pose_residual(pose: Pose9DoF, corr: CorrespondenceSet) -> float:
    """Weighted sum of squared distances after mapping the CAD points."""
    d = (corr.cad_points * pose.scale) @ pose.rotation.T + pose.translation - corr.scan_points
    return float((corr.weight_vector() * (d * d).sum(axis=1)).sum())


# ---------------------------------------------------------------------------
# Descriptors and retrieval
# ---------------------------------------------------------------------------

def pool_bins(n: int, res: int = DESCRIPTOR_RES) -> list[np.ndarray]:
    """Source cell indices per output bin along one axis.

    Cell ``c`` goes to bin ``floor(c * res / n)``; when ``n < res`` a bin
    left empty takes its nearest cell ``floor((b + 0.5) * n / res)``.
    """
    owner = (np.arange(n) * res) // n
    bins = []
    for b in range(res):
        cells = np.flatnonzero(owner == b)
        if len(cells) == 0:
            cells = np.array([int((b + 0.5) * n / res)])
        bins.append(cells)
    return bins


def compute_descriptor(object_occupancy: VoxelGrid) -> np.ndarray:
    """512-entry max-pooled occupancy over the occupied bounding region."""
    occ = object_occupancy.values > 0
    if not occ.any():
        raise ValueError("object occupancy grid is empty")
    nz = np.argwhere(occ)
    lo, hi = nz.min(axis=0), nz.max(axis=0) + 1
    region = occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    out = region
    for axis in range(3):
        bins = pool_bins(out.shape[axis])
        out = np.stack([np.take(out, cells, axis=axis).max(axis=axis) for cells in bins], axis=axis)
    return out.reshape(-1)


def normalized_object_occupancy(points, box: Obb, res: int = 2 * DESCRIPTOR_RES) -> VoxelGrid:
    """Occupancy of points in the box frame rescaled to the unit cube.

    This removes the object's pose and size so scan segments and CAD
    samples can share one descriptor space.
    """
    local = (as_points(points) - box.center) @ box.basis
    unit = local / (2.0 * box.half_extents) + 0.5
    unit = np.clip(unit, 0.0, 1.0 - 1e-12)
    return occupancy_in_grid(unit, np.zeros(3), 1.0 / res, (res, res, res))


def l1_distance(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum())


@dataclass
class CadEntry:
    model_id: str
    category: str
    points: np.ndarray
    descriptor: np.ndarray
    front_axis: tuple[int, int] = (1, 1)

    @property
    def half_extents(self) -> np.ndarray:
        return np.abs(self.points).max(axis=0)


@dataclass
class CadDatabase:
    entries: list[CadEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.model_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate model ids in CAD database")
        for e in self.entries:
            if len(e.points) == 0:
                raise ValueError(f"model {e.model_id} has no points")

    def get(self, model_id: str) -> CadEntry:
        for e in self.entries:
            if e.model_id == model_id:
                return e
        raise KeyError(model_id)

    def save(self, directory) -> None:
        """Write one ``<model_id>.xyz`` file per model plus ``index.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"format": "scanlayout.cad_index", "version": 1, "models": []}
        for e in sorted(self.entries, key=lambda e: e.model_id):
            fname = f"{e.model_id}.xyz"
            write_xyz(directory / fname, e.points)
            index["models"].append({"model_id": e.model_id, "category": e.category, "points": fname,
                                    "front_axis": list(e.front_axis),
                                    "descriptor": [float(x) for x in e.descriptor]})
        (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> CadDatabase:
        directory = Path(directory)
        index_path = directory / "index.json"
        if not index_path.is_file():
            raise FileNotFoundError(f"CAD index not found: {index_path}")
        index = json.loads(index_path.read_text())
        if index.get("format") != "scanlayout.cad_index" or index.get("version") != 1:
            raise ValueError(f"{index_path}: unsupported CAD index")
        entries = []
        for m in index["models"]:
            pts = read_xyz(directory / m["points"])
            desc = m.get("descriptor")
            if desc is None:
                desc = cad_descriptor(pts)
            entries.append(CadEntry(m["model_id"], m["category"], pts, np.asarray(desc, dtype=np.float64),
                                    tuple(m.get("front_axis", (1, 1)))))
        return cls(entries)


def cad_descriptor(points) -> np.ndarray:
    pts = as_points(points)
    half = np.maximum(np.abs(pts).max(axis=0), 1e-9)
    box = Obb(np.zeros(3), np.eye(3), half)
    return compute_descriptor(normalized_object_occupancy(pts, box))


def retrieve_cad(d, db: CadDatabase, category_filter: str | None = None) -> str:
    """Model id with the smallest L1 descriptor distance; ties go to the smallest id."""
    cands = [e for e in db.entries if category_filter is None or e.category == category_filter]
    if not cands:
        raise LookupError(f"no CAD models for category {category_filter!r}")
    d = np.asarray(d, dtype=np.float64)
    best = min(cands, key=lambda e: (l1_distance(d, e.descriptor), e.model_id))
    return best.model_id


# ---------------------------------------------------------------------------
# Plain-text point files
# ---------------------------------------------------------------------------

def write_xyz(path, points) -> None:
    pts = as_points(points)
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))


def read_xyz(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: expected 'x y z'")
        rows.append([float(v) for v in parts[:3]])
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)
