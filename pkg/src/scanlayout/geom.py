"""Geometric primitives shared by every stage: rotations, 9-DoF poses, boxes
and occupancy grids.

Points are carried as ``(n, 3)`` float64 arrays.  All value types are frozen
dataclasses whose arrays are made read-only on construction, so they can be
shared freely between threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def as_points(points) -> np.ndarray:
    """Coerce a point list to an ``(n, 3)`` float array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, tol):
        raise ValueError("matrix is not a proper rotation")
    return R


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula.  ``angle`` in radians; ``axis`` need not be unit."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        if angle == 0.0:
            return np.eye(3)
        raise ValueError("zero rotation axis")
    k = axis / n
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def matrix_to_axis_angle(R) -> tuple[np.ndarray, float]:
    """Inverse of :func:`axis_angle_to_matrix`; angle in ``[0, pi]``.

    Near ``pi`` the skew part vanishes, so the axis is read off the
    symmetric part instead.
    """
    R = np.asarray(R, dtype=np.float64)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(skew)
    # |skew| = 2 sin(angle); atan2 stays accurate near 0 and pi where arccos does not
    angle = float(np.arctan2(s / 2.0, (np.trace(R) - 1.0) / 2.0))
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0]), 0.0
    if np.pi - angle > 1e-6:
        return skew / s, angle
    # R = 2 k k^T - I at angle pi
    B = (R + np.eye(3)) / 2.0
    i = int(np.argmax(np.diag(B)))
    k = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    if s > 0 and np.dot(k, skew) < 0:
        k = -k
    return k / np.linalg.norm(k), angle


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (QR of a Gaussian matrix)."""
    A = rng.standard_normal((3, 3))
    Q, Rq = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(Rq))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def rotation_angle_deg(R1, R2) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# Poses and boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose9DoF:
    """Maps canonical CAD coordinates to scan coordinates: ``R @ (s * p) + t``."""

    translation: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "rotation", _frozen(check_rotation(self.rotation), (3, 3)))
        object.__setattr__(self, "scale", _frozen(self.scale, (3,)))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("scale components must be strictly positive")

    @classmethod
    def identity(cls) -> Pose9DoF:
        return cls(np.zeros(3), np.eye(3), np.ones(3))

    def params(self) -> np.ndarray:
        """Flat 9-vector (translation, rotation vector, scale)."""
        axis, angle = matrix_to_axis_angle(self.rotation)
        return np.concatenate([self.translation, axis * angle, self.scale])

    def to_dict(self) -> dict:
        return {
            "translation": self.translation.tolist(),
            "rotation": self.rotation.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Pose9DoF:
        return cls(d["translation"], d["rotation"], d["scale"])


def apply_pose(pose: Pose9DoF, points) -> np.ndarray:
    """Scale, then rotate, then translate each point."""
    pts = as_points(points)
    return (pts * pose.scale) @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _frozen(self.min, (3,)))
        object.__setattr__(self, "max", _frozen(self.max, (3,)))
        if np.any(self.min > self.max):
            raise ValueError("Aabb requires min <= max on every axis")

    @classmethod
    def from_points(cls, points) -> Aabb:
        pts = as_points(points)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def volume(self) -> float:
        return float(np.prod(self.extent))

    def translated(self, offset) -> Aabb:
        offset = np.asarray(offset, dtype=np.float64)
        return Aabb(self.min + offset, self.max + offset)


def expand_box(box: Aabb, margin: float) -> Aabb:
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    return Aabb(box.min - margin, box.max + margin)


def boxes_overlap(a: Aabb, b: Aabb) -> bool:
    """Closed-interval test on all three axes; touching boxes overlap."""
    return bool(np.all(a.min <= b.max) and np.all(b.min <= a.max))


@dataclass(frozen=True)
class Obb:
    """Oriented box.  ``front_axis`` is (axis index, sign) in the box frame."""

    center: np.ndarray
    basis: np.ndarray
    half_extents: np.ndarray
    front_axis: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        object.__setattr__(self, "basis", _frozen(check_rotation(self.basis), (3, 3)))
        object.__setattr__(self, "half_extents", _frozen(self.half_extents, (3,)))
        if not np.all(self.half_extents > 0):
            raise ValueError("half_extents must be positive")
        axis, sign = self.front_axis
        if axis not in (0, 1, 2) or sign not in (-1, 1):
            raise ValueError(f"invalid front_axis {self.front_axis}")
        object.__setattr__(self, "front_axis", (int(axis), int(sign)))

    @property
    def front(self) -> np.ndarray:
        axis, sign = self.front_axis
        return sign * self.basis[:, axis]

    def corners(self) -> np.ndarray:
        """The 8 box corners, ordered by the binary pattern of (x, y, z) signs."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return (signs * self.half_extents) @ self.basis.T + self.center

    def face(self, axis: int, sign: int) -> tuple[np.ndarray, np.ndarray]:
        """Corners (4, 3) and outward unit normal of one face."""
        signs = []
        others = [a for a in range(3) if a != axis]
        for u, v in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            s = np.zeros(3)
            s[axis] = sign
            s[others[0]] = u
            s[others[1]] = v
            signs.append(s)
        pts = (np.array(signs) * self.half_extents) @ self.basis.T + self.center
        return pts, sign * self.basis[:, axis]

    def aabb(self) -> Aabb:
        return Aabb.from_points(self.corners())

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        local = (as_points(points) - self.center) @ self.basis
        return np.all(np.abs(local) <= self.half_extents + margin, axis=1)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "basis": self.basis.tolist(),
            "half_extents": self.half_extents.tolist(),
            "front_axis": list(self.front_axis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Obb:
        return cls(d["center"], d["basis"], d["half_extents"], tuple(d["front_axis"]))


# ---------------------------------------------------------------------------
# Voxel grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelGrid:
    """Dense scalar grid. ``values`` is indexed ``[ix, iy, iz]``; cell
    ``(i, j, k)`` spans ``origin + voxel_size * [i, i+1)`` etc."""

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise ValueError(f"values must be a non-empty 3-D array, got shape {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * np.array(self.dims, dtype=np.float64)

    def cell_of(self, points) -> np.ndarray:
        """Floored cell index per point (may fall outside the grid)."""
        return np.floor((as_points(points) - self.origin) / self.voxel_size).astype(np.int64)

    def clamp_index(self, idx) -> np.ndarray:
        return np.clip(np.asarray(idx), 0, np.array(self.dims) - 1)

    def cell_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def with_values(self, values) -> VoxelGrid:
        return VoxelGrid(self.origin, self.voxel_size, values)


def voxelize(points, voxel_size: float, padding: int = 0) -> VoxelGrid:
    """Binary occupancy of the cells hit by ``points``.

    The grid spans the floored cells of the point bounds plus ``padding``
    empty cells on every side.
    """
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("cannot voxelize an empty point list")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    lo = np.floor(pts.min(axis=0) / voxel_size) - padding
    hi = np.floor(pts.max(axis=0) / voxel_size) + padding
    origin = lo * voxel_size
    dims = (hi - lo + 1).astype(np.int64)
    values = np.zeros(tuple(dims))
    idx = np.floor((pts - origin) / voxel_size).astype(np.int64)
    # recomputing the origin can push a point one ulp below its cell
    idx = np.clip(idx, 0, dims - 1)
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(origin, voxel_size, values)


def occupancy_in_grid(points, origin, voxel_size: float, dims) -> VoxelGrid:
    """Binary occupancy of ``points`` on a fixed grid; outside points are dropped."""
    pts = as_points(points)
    dims = np.asarray(dims, dtype=np.int64)
    values = np.zeros(tuple(dims))
    idx = np.floor((pts - np.asarray(origin)) / voxel_size).astype(np.int64)
    keep = np.all((idx >= 0) & (idx < dims), axis=1)
    idx = idx[keep]
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(origin, voxel_size, values)
