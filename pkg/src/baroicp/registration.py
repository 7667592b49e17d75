"""Point-to-plane ICP with 6-, 4- and 3-DOF parameterizations.

The 3-DOF variant fixes roll and pitch from the measured gravity direction and
the z translation from barometric altitude, leaving yaw and the horizontal
translation ``tau = (gamma, r_x, r_y)`` to the solver. Each iteration solves
the small-angle normal equations

    (sum a_k a_k^T) tau = sum (n_k . d_k) a_k,
    a_k = [n_k . (e_z x p_k), n_x, n_y],   d_k = q_k - p_k

and applies the increment with the exact rotation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .altimetry import AltitudeReading
from .errors import ConfigurationError, InvalidInputError
from .pointcloud import (
    Correspondences,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    gravity_rotation,
    rot_z,
    so3_exp,
    yaw_of,
)

MAX_YAW_STEP = 0.1
DEGENERACY_RATIO = 1e-8


class ConstraintMode(str, enum.Enum):
    six_dof = "six_dof"
    four_dof = "four_dof"
    three_dof = "three_dof"


PARAMETER_NAMES = {
    ConstraintMode.three_dof: ("yaw", "x", "y"),
    ConstraintMode.four_dof: ("yaw", "x", "y", "z"),
    ConstraintMode.six_dof: ("roll", "pitch", "yaw", "x", "y", "z"),
}


@dataclass(frozen=True)
class Tau:
    gamma: float = 0.0
    r_x: float = 0.0
    r_y: float = 0.0
    degenerate: tuple[str, ...] = ()

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.gamma, self.r_x, self.r_y)):
            raise InvalidInputError("tau components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma, self.r_x, self.r_y])

    def transform(self) -> RigidTransform:
        return RigidTransform(rot_z(self.gamma), (self.r_x, self.r_y, 0.0))


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 40
    rotation_tol: float = 1e-4
    translation_tol: float = 1e-4
    trim_ratio: float = 0.1
    max_dist: float = 1.0
    damping: float = 1e-9

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be at least 1")
        if not 0.0 <= self.trim_ratio < 0.5:
            raise ConfigurationError("trim_ratio must lie in [0, 0.5)")
        if self.rotation_tol <= 0 or self.translation_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.max_dist < 0 or self.damping < 0:
            raise ConfigurationError("max_dist and damping must be non-negative")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    final_error: float
    iterations: int
    converged: bool
    degenerate_directions: tuple[str, ...] = ()
    n_pairs: int = 0


def _pair_arrays(reading_pts, ref_pts, ref_normals, corr: Correspondences):
    p = reading_pts[corr.pairs[:, 0]]
    q = ref_pts[corr.pairs[:, 1]]
    n = ref_normals[corr.pairs[:, 1]]
    return p, q, n


def _require_normals(reference: PointCloud):
    if reference.normals is None:
        raise InvalidInputError("reference cloud needs normals")
    return reference.normals


def trim_correspondences(reading: PointCloud, reference: PointCloud, corr, ratio: float):
    """Drop the ``ratio`` fraction of pairs with the largest point-to-plane residual."""
    return _trim(reading.points, reference.points, _require_normals(reference), corr, ratio)


def _trim(reading_pts, ref_pts, ref_normals, corr, ratio):
    n_drop = int(math.floor(ratio * len(corr)))
    if n_drop == 0:
        return corr
    p, q, n = _pair_arrays(reading_pts, ref_pts, ref_normals, corr)
    resid = np.abs(np.einsum("ij,ij->i", n, p - q))
    keep = np.sort(np.argsort(resid, kind="stable")[: len(corr) - n_drop])
    return corr.subset(keep)


def point_to_plane_error(reading: PointCloud, reference: PointCloud, corr: Correspondences) -> float:
    """Sum of squared point-to-plane residuals; ``reading`` is already in the reference frame."""
    p, q, n = _pair_arrays(reading.points, reference.points, _require_normals(reference), corr)
    r = np.einsum("ij,ij->i", n, p - q)
    return float(r @ r)


def design_rows(p, n, mode: ConstraintMode) -> np.ndarray:
    """Rows ``a_k`` of the linearized residual for each pair."""
    mode = ConstraintMode(mode)
    if mode is ConstraintMode.six_dof:
        return np.hstack([np.cross(p, n), n])
    # n . (e_z x p) with e_z x p = (-p_y, p_x, 0)
    yaw_col = n[:, 1] * p[:, 0] - n[:, 0] * p[:, 1]
    cols = [yaw_col, n[:, 0], n[:, 1]]
    if mode is ConstraintMode.four_dof:
        cols.append(n[:, 2])
    return np.column_stack(cols)


def solve_normal_equations(A, b, damping: float, names):
    """Solve ``(A^T A + damping I) x = A^T b`` with unobservable directions zeroed.

    An eigen-direction of ``A^T A`` is degenerate when its eigenvalue falls below
    1e-8 of the trace. Returns ``(x, degenerate_names)``.
    """
    H = A.T @ A
    g = A.T @ b
    dim = H.shape[0]
    trace = float(np.trace(H))
    if not trace > 0 or not math.isfinite(trace):
        return np.zeros(dim), tuple(names)
    evals, evecs = np.linalg.eigh(H)
    weak = evals < DEGENERACY_RATIO * trace
    if not np.any(weak):
        return np.linalg.solve(H + damping * np.eye(dim), g), ()
    strong = ~weak
    coords = (evecs[:, strong].T @ g) / (evals[strong] + damping)
    x = evecs[:, strong] @ coords
    flagged = sorted({int(np.abs(evecs[:, i]).argmax()) for i in np.flatnonzero(weak)})
    return x, tuple(names[i] for i in flagged)


def solve_tau(
    reading: PointCloud, reference: PointCloud, corr: Correspondences, cfg: IcpConfig = IcpConfig()
) -> Tau:
    """One linearized 3-DOF step for the given (already trimmed) correspondences."""
    p, q, n = _pair_arrays(reading.points, reference.points, _require_normals(reference), corr)
    A = design_rows(p, n, ConstraintMode.three_dof)
    b = np.einsum("ij,ij->i", n, q - p)
    x, degenerate = solve_normal_equations(
        A, b, cfg.damping, PARAMETER_NAMES[ConstraintMode.three_dof]
    )
    return Tau(float(x[0]), float(x[1]), float(x[2]), degenerate)


def _clamp(value, limit):
    return max(-limit, min(limit, value))


def icp(
    reading: PointCloud,
    map_cloud: PointCloud,
    prior: RigidTransform,
    altitude: AltitudeReading | float | None,
    gravity_dir,
    mode: ConstraintMode | str,
    cfg: IcpConfig = IcpConfig(),
    index: SpatialIndex | None = None,
) -> IcpResult:
    """Register a sensor-frame ``reading`` against a gravity-aligned ``map_cloud``.

    ``prior`` maps the sensor frame into the map frame. When given, ``altitude``
    (map-frame z of the sensor) replaces the prior's z. In ``three_dof`` mode it
    is held fixed; in the other modes it only seeds the optimization.
    ``gravity_dir`` is the measured gravity direction in the sensor frame and
    fixes roll and pitch for ``three_dof`` and ``four_dof``.
    """
    mode = ConstraintMode(mode)
    if map_cloud.frame not in ("map", "gravity_aligned"):
        raise InvalidInputError("map must be expressed in a gravity-aligned frame")
    ref_normals = _require_normals(map_cloud)
    if index is None:
        index = SpatialIndex(map_cloud)
    z_alt = altitude.delta_z if isinstance(altitude, AltitudeReading) else altitude
    if mode is ConstraintMode.three_dof and z_alt is None:
        raise ConfigurationError("three_dof registration requires an altitude reading")

    names = PARAMETER_NAMES[mode]
    pts = reading.points
    t = np.array(prior.translation, dtype=float)
    if z_alt is not None:
        t[2] = float(z_alt)
    z_fixed = t[2]

    if mode is ConstraintMode.six_dof:
        C = np.array(prior.rotation)
        yaw, C_grav = 0.0, None
    else:
        C_grav = gravity_rotation(gravity_dir)
        yaw = yaw_of(prior.rotation @ C_grav.T)
        C = rot_z(yaw) @ C_grav

    def current():
        if C_grav is not None:
            return rot_z(yaw) @ C_grav
        return C

    def correspondences(R, tr):
        moved = PointCloud(pts @ R.T + tr, None, map_cloud.frame, reading.valid)
        corr = index.match(moved, cfg.max_dist)
        corr = _trim(moved.points, map_cloud.points, ref_normals, corr, cfg.trim_ratio)
        return moved.points, corr

    converged = False
    degenerate: tuple[str, ...] = ()
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        R = current()
        moved, corr = correspondences(R, t)
        p, q, n = _pair_arrays(moved, map_cloud.points, ref_normals, corr)
        A = design_rows(p, n, mode)
        b = np.einsum("ij,ij->i", n, q - p)
        x, degenerate = solve_normal_equations(A, b, cfg.damping, names)

        if mode is ConstraintMode.six_dof:
            w = x[:3]
            angle = float(np.linalg.norm(w))
            if angle > MAX_YAW_STEP:
                w = w * (MAX_YAW_STEP / angle)
            dR = so3_exp(w)
            C = dR @ C
            t = dR @ t + x[3:]
            rot_step, trans_step = float(np.linalg.norm(w)), float(np.linalg.norm(x[3:]))
        else:
            gamma = _clamp(float(x[0]), MAX_YAW_STEP)
            yaw += gamma
            dR = rot_z(gamma)
            xy = dR[:2, :2] @ t[:2] + x[1:3]
            if mode is ConstraintMode.four_dof:
                t = np.array([xy[0], xy[1], t[2] + x[3]])
                trans_step = float(np.linalg.norm(x[1:4]))
            else:
                t = np.array([xy[0], xy[1], z_fixed])
                trans_step = float(np.linalg.norm(x[1:3]))
            rot_step = abs(gamma)

        if rot_step < cfg.rotation_tol and trans_step < cfg.translation_tol:
            converged = True
            break

    R = current()
    if mode is ConstraintMode.three_dof:
        t[2] = z_fixed
    moved, corr = correspondences(R, t)
    p, q, n = _pair_arrays(moved, map_cloud.points, ref_normals, corr)
    resid = np.einsum("ij,ij->i", n, p - q)
    return IcpResult(
        RigidTransform(R, t),
        float(resid @ resid),
        iterations,
        converged,
        degenerate,
        len(corr),
    )
