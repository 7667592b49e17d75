"""Point clouds, rigid transforms and nearest-neighbour correspondences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError, NoOverlapError

FRAMES = ("sensor", "gravity_aligned", "map")
DOWN = np.array([0.0, 0.0, -1.0])


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    K = skew(np.asarray(axis, dtype=float))
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    return axis_angle(w / theta, theta)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(C) -> float:
    """Angle of the z-rotation closest to ``C`` in Frobenius norm."""
    return math.atan2(C[1, 0] - C[0, 1], C[0, 0] + C[1, 1])


@dataclass(frozen=True)
class RigidTransform:
    """Maps a point ``p`` to ``rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        C = np.array(self.rotation, dtype=float)
        r = np.array(self.translation, dtype=float).reshape(-1)
        if C.shape != (3, 3) or r.shape != (3,):
            raise InvalidInputError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(C)) and np.all(np.isfinite(r))):
            raise InvalidInputError("transform entries must be finite")
        if np.abs(C.T @ C - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(C) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not a proper orthonormal matrix")
        C.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "rotation", C)
        object.__setattr__(self, "translation", r)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        return cls(rot_z(yaw), translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Ct = self.rotation.T
        return RigidTransform(Ct, -Ct @ self.translation)

    @property
    def yaw(self) -> float:
        return yaw_of(self.rotation)


@dataclass(frozen=True)
class PointCloud:
    """Points with optional unit normals.

    ``valid`` marks points usable for registration; normal estimation clears it
    for degenerate neighbourhoods.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    frame: str = "sensor"
    valid: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        if self.frame not in FRAMES:
            raise InvalidInputError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        nrm = None
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise InvalidInputError("points and normals must have the same length")
            if nrm.size and np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > 1e-6:
                raise InvalidInputError("normals must be unit vectors")
            nrm.setflags(write=False)
        valid = (
            np.ones(len(pts), dtype=bool)
            if self.valid is None
            else np.array(self.valid, dtype=bool).reshape(-1)
        )
        if valid.shape != (len(pts),):
            raise InvalidInputError("valid mask must match the number of points")
        pts.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "valid", valid)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def transformed(self, T: RigidTransform, frame: str | None = None) -> "PointCloud":
        normals = None if self.normals is None else T.rotate(self.normals)
        return replace(self, points=T.apply(self.points), normals=normals, frame=frame or self.frame)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            self.frame,
            self.valid[idx],
        )

    @staticmethod
    def concatenate(clouds, frame=None) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            raise InvalidInputError("nothing to concatenate")
        with_normals = all(c.has_normals for c in clouds)
        return PointCloud(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.normals for c in clouds]) if with_normals else None,
            frame or clouds[0].frame,
            np.concatenate([c.valid for c in clouds]),
        )


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals over each point and its ``k`` nearest neighbours.

    Normals are oriented toward ``viewpoint``. Points whose neighbourhood has
    rank below two get ``valid = False``.
    """
    if k < 3:
        raise InvalidInputError("k must be at least 3")
    n = len(cloud)
    if n < k + 1:
        raise InvalidInputError(f"need at least {k + 1} points for k={k}, got {n}")
    pts = cloud.points
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    spread = evals[:, 2]
    degenerate = (spread <= 0) | (evals[:, 1] <= 1e-10 * spread)

    to_view = np.asarray(viewpoint, dtype=float) - pts
    facing = np.einsum("ij,ij->i", normals, to_view)
    scale = np.linalg.norm(to_view, axis=1) + 1.0
    ambiguous = np.abs(facing) <= 1e-9 * scale
    # ambiguous orientation: make the dominant component positive
    dominant = normals[np.arange(n), np.abs(normals).argmax(axis=1)]
    sign = np.where(ambiguous, np.sign(dominant), np.sign(facing))
    sign[sign == 0] = 1.0
    normals = normals * sign[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, cloud.frame, cloud.valid & ~degenerate)


def gravity_rotation(gravity_dir) -> np.ndarray:
    """Smallest rotation taking ``gravity_dir`` onto (0, 0, -1).

    Antiparallel input rotates by pi about +x.
    """
    g = np.asarray(gravity_dir, dtype=float).reshape(-1)
    if g.shape != (3,) or not np.all(np.isfinite(g)):
        raise InvalidInputError("gravity_dir must be a finite 3-vector")
    if abs(np.linalg.norm(g) - 1.0) > 1e-6:
        raise InvalidInputError("gravity_dir must be a unit vector")
    g = g / np.linalg.norm(g)
    axis = np.cross(g, DOWN)
    s = float(np.linalg.norm(axis))
    c = float(g @ DOWN)
    if s < 1e-9:
        if c > 0:
            return np.eye(3)
        return axis_angle((1.0, 0.0, 0.0), math.pi)
    return axis_angle(axis / s, math.atan2(s, c))


def gravity_align(cloud: PointCloud, gravity_dir) -> tuple[PointCloud, RigidTransform]:
    T = RigidTransform(gravity_rotation(gravity_dir), np.zeros(3))
    return cloud.transformed(T, frame="gravity_aligned"), T


@dataclass(frozen=True)
class Correspondences:
    """``pairs[:, 0]`` indexes the reading, ``pairs[:, 1]`` the reference."""

    pairs: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        dist = np.asarray(self.distances, dtype=float).reshape(-1)
        if len(dist) != len(pairs):
            raise InvalidInputError("pairs and distances must have equal length")
        if np.any(dist < 0) or np.any(pairs < 0):
            raise InvalidInputError("indices and distances must be non-negative")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "distances", dist)

    def __len__(self):
        return len(self.pairs)

    def subset(self, keep) -> "Correspondences":
        return Correspondences(self.pairs[keep], self.distances[keep])


class SpatialIndex:
    """Static kd-tree over the valid points of a reference cloud."""

    def __init__(self, reference: PointCloud):
        if len(reference) == 0:
            raise InvalidInputError("reference cloud is empty")
        self.reference = reference
        self._ids = np.flatnonzero(reference.valid)
        if len(self._ids) == 0:
            raise InvalidInputError("reference cloud has no valid points")
        self._tree = cKDTree(reference.points[self._ids])

    def match(self, reading: PointCloud, max_dist: float = 1.0) -> Correspondences:
        if len(reading) == 0:
            raise InvalidInputError("reading cloud is empty")
        if reading.frame != self.reference.frame:
            raise InvalidInputError(
                f"frame mismatch: reading is {reading.frame!r}, reference is {self.reference.frame!r}"
            )
        src = np.flatnonzero(reading.valid)
        dist, j = self._tree.query(reading.points[src], k=1)
        keep = dist <= max_dist
        if not np.any(keep):
            raise NoOverlapError(f"no correspondences within max_dist={max_dist}")
        return Correspondences(np.column_stack([src[keep], self._ids[j[keep]]]), dist[keep])


def match(reading: PointCloud, reference: PointCloud, max_dist: float = 1.0) -> Correspondences:
    """Nearest reference point for each reading point, pairs beyond ``max_dist`` dropped."""
    return SpatialIndex(reference).match(reading, max_dist)
