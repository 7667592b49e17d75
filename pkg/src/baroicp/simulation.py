"""Synthetic worlds, lidar scans, barometer pairs and noisy odometry.

Every generator is a pure function of its inputs and a seed. Independent
random streams are derived from ``(seed, purpose, index)`` so that, for
example, scan ``k`` does not depend on how many scans were rendered before.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .altimetry import STANDARD, AtmosphereConstants
from .barometry import PressureStream
from .errors import ConfigurationError, EmptyScanError, InvalidInputError
from .pointcloud import PointCloud, RigidTransform, axis_angle, rot_z
from .trajectory import Trajectory

# purpose tags for independent random streams
_SCAN, _BARO, _PRIOR, _CAMPAIGN = 1, 2, 3, 4

WARMUP_START_C = 20.0
WARMUP_END_C = 45.0
WARMUP_TAU_S = 600.0
BASE_TEMPERATURE_C = 20.0
P_STD = 101325.0


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


@dataclass(frozen=True)
class Surface:
    """Rectangle ``center + a*u + b*v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        arrs = {k: np.array(getattr(self, k), dtype=float).reshape(3) for k in ("center", "normal", "u", "v")}
        n, u, v = arrs["normal"], arrs["u"], arrs["v"]
        for name, vec in (("normal", n), ("u", u), ("v", v)):
            if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                raise InvalidInputError(f"surface {name} must be a unit vector")
        if max(abs(n @ u), abs(n @ v), abs(u @ v)) > 1e-9:
            raise InvalidInputError("surface axes must be orthogonal")
        if not (self.half_u > 0 and self.half_v > 0):
            raise InvalidInputError("surface extents must be positive")
        for k, a in arrs.items():
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    @classmethod
    def rectangle(cls, center, normal, u, half_u, half_v) -> "Surface":
        n = np.asarray(normal, dtype=float)
        u = np.asarray(u, dtype=float)
        return cls(center, n, u, np.cross(n, u), float(half_u), float(half_v))

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.normal


@dataclass(frozen=True)
class World:
    surfaces: tuple
    floors: tuple
    spec: Mapping = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "shaft" if "shaft_depth" in self.spec else "corridor"


CORRIDOR_KEYS = {"floors", "floor_height", "corridor_length", "corridor_width", "ceiling_height"}
SHAFT_KEYS = {"shaft_depth", "shaft_radius", "facets"}


def build_world(spec: Mapping) -> World:
    """Corridor levels stacked downwards from z = 0, or a faceted vertical shaft.

    Corridor levels run along +x over ``[0, corridor_length]`` and are centred
    on y = 0. The ceiling defaults to 70% of the floor height so that a solid
    slab separates consecutive levels. The shaft is a regular polygonal prism
    whose inscribed radius is ``shaft_radius``, spanning ``[-shaft_depth, 0]``.
    """
    spec = dict(spec)
    keys = set(spec)
    if "shaft_depth" in keys:
        if keys - SHAFT_KEYS or not {"shaft_depth", "shaft_radius"} <= keys:
            raise ConfigurationError(f"shaft world takes {sorted(SHAFT_KEYS)}, got {sorted(keys)}")
        return _shaft(float(spec["shaft_depth"]), float(spec["shaft_radius"]), int(spec.get("facets", 24)), spec)
    required = CORRIDOR_KEYS - {"ceiling_height"}
    if keys - CORRIDOR_KEYS or not required <= keys:
        raise ConfigurationError(f"corridor world takes {sorted(CORRIDOR_KEYS)}, got {sorted(keys)}")
    return _corridor(spec)


def _positive(**values):
    for name, v in values.items():
        if not (math.isfinite(v) and v > 0):
            raise InvalidInputError(f"{name} must be positive, got {v}")


def _corridor(spec) -> World:
    n = int(spec["floors"])
    h = float(spec["floor_height"])
    length = float(spec["corridor_length"])
    width = float(spec["corridor_width"])
    ceiling = float(spec.get("ceiling_height", 0.7 * h))
    _positive(floors=n, floor_height=h, corridor_length=length, corridor_width=width, ceiling_height=ceiling)
    if ceiling >= h:
        raise InvalidInputError("ceiling_height must be below floor_height")
    ex, ey, ez = np.eye(3)
    surfaces = []
    floors = tuple(-k * h for k in range(n))
    for z in floors:
        mid = z + ceiling / 2
        surfaces += [
            Surface.rectangle((length / 2, 0.0, z), ez, ex, length / 2, width / 2),
            Surface.rectangle((length / 2, 0.0, z + ceiling), -ez, ex, length / 2, width / 2),
            Surface.rectangle((length / 2, width / 2, mid), -ey, ex, length / 2, ceiling / 2),
            Surface.rectangle((length / 2, -width / 2, mid), ey, ex, length / 2, ceiling / 2),
        ]
    return World(tuple(surfaces), floors, spec)


def _shaft(depth, radius, facets, spec) -> World:
    _positive(shaft_depth=depth, shaft_radius=radius, facets=facets)
    if facets < 3:
        raise InvalidInputError("a shaft needs at least 3 facets")
    half_w = radius * math.tan(math.pi / facets)
    surfaces = []
    for k in range(facets):
        a = 2 * math.pi * k / facets
        radial = np.array([math.cos(a), math.sin(a), 0.0])
        tangent = np.array([-math.sin(a), math.cos(a), 0.0])
        # inward normal; facet spans the tangent direction and the vertical
        surfaces.append(Surface.rectangle(radius * radial + [0, 0, -depth / 2], -radial, tangent, half_w, depth / 2))
    return World(tuple(surfaces), (0.0,), spec)


@dataclass(frozen=True)
class SensorRigSim:
    lidar_range: float = 30.0
    lidar_sigma: float = 0.01
    points_per_scan: int = 4000
    baro_sigma: float = 1.5
    # rover bias in pascals as polynomial coefficients in sensor temperature (constant first)
    baro_temp_bias: tuple = (0.0, 0.8)
    # shared atmospheric drift: polynomial coefficients in time or a callable
    atm_drift: tuple | Callable = (0.0,)
    # pitch misalignment between the gravity sensor and the lidar, radians
    imu_tilt: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lidar_sigma < 0 or self.baro_sigma < 0:
            raise InvalidInputError("noise levels must be non-negative")
        if not self.lidar_range > 0 or self.points_per_scan < 1:
            raise InvalidInputError("lidar_range and points_per_scan must be positive")
        if not callable(self.atm_drift):
            object.__setattr__(self, "atm_drift", tuple(float(c) for c in self.atm_drift))
        object.__setattr__(self, "baro_temp_bias", tuple(float(c) for c in self.baro_temp_bias))

    def drift(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if callable(self.atm_drift):
            return np.asarray(self.atm_drift(t), dtype=float) * np.ones_like(t)
        return np.polynomial.polynomial.polyval(t, self.atm_drift) * np.ones_like(t)

    def temp_bias(self, t_sensor) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(t_sensor, dtype=float), self.baro_temp_bias)

    def tilt_rotation(self) -> np.ndarray:
        return axis_angle([0.0, 1.0, 0.0], self.imu_tilt)


# ---------------------------------------------------------------- lidar


def _occluded(origin, targets, surface: Surface) -> np.ndarray:
    d = targets - origin
    denom = d @ surface.normal
    num = (surface.center - origin) @ surface.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = num / denom
    hit = (np.abs(denom) > 1e-12) & (lam > 1e-9) & (lam < 1.0 - 1e-9)
    if not hit.any():
        return hit
    y = origin + lam[hit, None] * d[hit] - surface.center
    inside = (np.abs(y @ surface.u) <= surface.half_u) & (np.abs(y @ surface.v) <= surface.half_v)
    hit[hit] = inside
    return hit


def _visible_box(surface: Surface, origin, max_range):
    """Parameter box on ``surface`` that can hold points within range, or None."""
    dist = surface.signed_distance(origin)
    if dist <= 1e-9 or dist >= max_range:
        return None
    rho = math.sqrt(max_range**2 - dist**2)
    rel = origin - surface.center
    a0, b0 = rel @ surface.u, rel @ surface.v
    lo = (max(-surface.half_u, a0 - rho), max(-surface.half_v, b0 - rho))
    hi = (min(surface.half_u, a0 + rho), min(surface.half_v, b0 + rho))
    if lo[0] >= hi[0] or lo[1] >= hi[1]:
        return None
    return lo, hi


def render_scan(world: World, pose: RigidTransform, rig: SensorRigSim, index: int = 0) -> PointCloud:
    """Sample ``rig.points_per_scan`` visible points, area-weighted, in the sensor frame.

    ``pose`` maps the sensor frame into the world. Points are drawn uniformly
    over the parts of front-facing surfaces within ``lidar_range``; samples
    hidden behind another surface are rejected. Range noise is applied along
    the ray. Normals come from the generating surface and face the sensor.
    """
    origin = np.asarray(pose.translation)
    rng = _rng(rig.seed, _SCAN, index)
    boxes = []
    for s_idx, surf in enumerate(world.surfaces):
        box = _visible_box(surf, origin, rig.lidar_range)
        if box is not None:
            (a0, b0), (a1, b1) = box
            boxes.append((s_idx, box, (a1 - a0) * (b1 - b0)))
    if not boxes:
        raise EmptyScanError("no surface within lidar range is visible from this pose")
    weights = np.array([w for *_, w in boxes])
    weights /= weights.sum()

    want = rig.points_per_scan
    pts, nrm = [], []
    have = 0
    for _ in range(50):
        counts = rng.multinomial(2 * want, weights)
        for (s_idx, ((a0, b0), (a1, b1)), _), m in zip(boxes, counts):
            if m == 0:
                continue
            surf = world.surfaces[s_idx]
            a = rng.uniform(a0, a1, m)
            b = rng.uniform(b0, b1, m)
            x = surf.center + a[:, None] * surf.u + b[:, None] * surf.v
            keep = np.linalg.norm(x - origin, axis=1) <= rig.lidar_range
            for o_idx, other in enumerate(world.surfaces):
                if o_idx != s_idx and keep.any():
                    keep[keep] &= ~_occluded(origin, x[keep], other)
            x = x[keep]
            pts.append(x)
            nrm.append(np.tile(surf.normal, (len(x), 1)))
            have += len(x)
        if have >= want:
            break
    if have == 0:
        raise EmptyScanError("every sampled point was occluded")
    x = np.concatenate(pts)
    n = np.concatenate(nrm)
    # interleave surfaces before truncating so the kept subset stays area-weighted
    order = rng.permutation(len(x))[:want]
    x, n = x[order], n[order]
    if rig.lidar_sigma > 0:
        ray = x - origin
        r = np.linalg.norm(ray, axis=1, keepdims=True)
        x = origin + ray / r * (r + rng.normal(0.0, rig.lidar_sigma, (len(x), 1)))
    inv = pose.inverse()
    return PointCloud(inv.apply(x), inv.rotate(n), "sensor")


def measured_gravity(pose: RigidTransform, rig: SensorRigSim) -> np.ndarray:
    """Gravity direction in the sensor frame as seen through the misaligned IMU."""
    g = pose.rotation.T @ np.array([0.0, 0.0, -1.0])
    return rig.tilt_rotation() @ g


# ---------------------------------------------------------------- ground truth


@dataclass(frozen=True)
class GroundTruth:
    trajectory: Trajectory
    floor_heights: tuple
    # (start, end) time windows removed from evaluation, e.g. elevator rides
    exclusions: tuple = ()
    # trajectory indices at which lidar scans are taken
    scan_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def excluded(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        mask = np.zeros(t.shape, dtype=bool)
        for a, b in self.exclusions:
            mask |= (t >= a) & (t <= b)
        return mask


def _poses_to_truth(samples, floors, exclusions, scan_times):
    traj = Trajectory.from_poses(samples)
    idx = np.searchsorted(traj.timestamps, np.asarray(scan_times) - 1e-9)
    return GroundTruth(traj, tuple(floors), tuple(exclusions), idx.astype(np.int64))


def corridor_ground_truth(
    world: World,
    speed: float = 1.0,
    rate: float = 10.0,
    sensor_height: float = 0.5,
    margin: float = 2.0,
    scan_spacing: float = 1.0,
    lift_speed: float = 0.5,
    pause: float = 30.0,
) -> GroundTruth:
    """Drive each level end to end, alternating direction, lifting down between levels.

    During a lift ride the platform also turns around, then waits ``pause``
    seconds at the landing. Ride and pause form one exclusion window and
    carry no scans.
    """
    if world.kind != "corridor":
        raise InvalidInputError("corridor trajectory needs a corridor world")
    _positive(speed=speed, rate=rate, scan_spacing=scan_spacing, lift_speed=lift_speed)
    length = float(world.spec["corridor_length"])
    dt = 1.0 / rate
    samples, exclusions, scan_times = [], [], []
    x0, x1 = margin, length - margin
    step = speed * dt
    n_drive = int(round((x1 - x0) / step))
    per_scan = max(1, int(round(scan_spacing / step)))

    def add(pose):
        # timestamps from the sample count so they do not accumulate rounding
        samples.append((len(samples) * dt, pose))
        return samples[-1][0]

    for level, floor in enumerate(world.floors):
        forward = level % 2 == 0
        yaw = 0.0 if forward else math.pi
        z = floor + sensor_height
        for k in range(n_drive + 1):
            x = x0 + k * step if forward else x1 - k * step
            t = add(RigidTransform(rot_z(yaw), (x, 0.0, z)))
            if k % per_scan == 0:
                scan_times.append(t)
        if level + 1 < len(world.floors):
            x_end = samples[-1][1].translation[0]
            z_next = world.floors[level + 1] + sensor_height
            n_ride = int(math.ceil((z - z_next) / (lift_speed * dt)))
            start = samples[-1][0]
            for k in range(1, n_ride):
                f = k / n_ride
                t = add(RigidTransform(rot_z(yaw + math.pi * f), (x_end, 0.0, z + (z_next - z) * f)))
            for _ in range(int(round(pause * rate))):
                t = add(RigidTransform(rot_z(yaw + math.pi), (x_end, 0.0, z_next)))
            exclusions.append((start + dt, t))
    return _poses_to_truth(samples, world.floors, exclusions, scan_times)


def shaft_ground_truth(
    world: World,
    speed: float = 0.25,
    rate: float = 10.0,
    margin: float = 1.0,
    scan_spacing: float = 0.5,
    yaw_rate: float = 0.05,
) -> GroundTruth:
    """Descend the shaft axis at constant speed while slowly turning (yaw_rate in rad/m)."""
    if world.kind != "shaft":
        raise InvalidInputError("shaft trajectory needs a shaft world")
    _positive(speed=speed, rate=rate, scan_spacing=scan_spacing)
    depth = float(world.spec["shaft_depth"])
    dt = 1.0 / rate
    step = speed * dt
    n = int(round((depth - 2 * margin) / step))
    per_scan = max(1, int(round(scan_spacing / step)))
    samples, scan_times = [], []
    for k in range(n + 1):
        t = k * dt
        s = k * step
        samples.append((t, RigidTransform(rot_z(yaw_rate * s), (0.0, 0.0, -margin - s))))
        if k % per_scan == 0:
            scan_times.append(t)
    return _poses_to_truth(samples, world.floors, (), scan_times)


# ---------------------------------------------------------------- barometers


def sensor_temperature(t) -> np.ndarray:
    """First-order warm-up of the rover sensor after power-on."""
    t = np.asarray(t, dtype=float)
    return WARMUP_END_C - (WARMUP_END_C - WARMUP_START_C) * np.exp(-t / WARMUP_TAU_S)


def simulate_baro(
    gt: GroundTruth,
    rig: SensorRigSim,
    T_ambient: float = 288.15,
    consts: AtmosphereConstants = STANDARD,
) -> tuple[PressureStream, PressureStream]:
    """Base and rover pressure streams sampled at the ground-truth timestamps."""
    ts = gt.trajectory.timestamps
    if len(ts) == 0:
        raise InvalidInputError("ground truth trajectory is empty")
    z = gt.trajectory.translations[:, 2]
    rng = _rng(rig.seed, _BARO)
    noise = rng.normal(0.0, 1.0, (2, len(ts))) * rig.baro_sigma
    drift = rig.drift(ts)
    t_rover = sensor_temperature(ts)
    # exp of the exact hydrostatic exponent, no further approximation
    p_true = P_STD * np.exp(-consts.g * z / (consts.R_dry * T_ambient))
    rover = p_true + drift + rig.temp_bias(t_rover) + noise[1]
    base = P_STD + drift + noise[0]
    return (
        PressureStream("base", ts.copy(), base, np.full_like(ts, BASE_TEMPERATURE_C)),
        PressureStream("rover", ts.copy(), rover, t_rover),
    )


@dataclass(frozen=True)
class CampaignLog:
    timestamps: np.ndarray
    p_raw: np.ndarray
    t: np.ndarray
    p_ref: np.ndarray


def simulate_calibration_campaign(
    rig: SensorRigSim,
    bias: Sequence[float] | None = None,
    duration: float = 4 * 3600.0,
    rate: float = 1.0,
    cycles: int = 8,
    t_range: tuple = (5.0, 50.0),
    stream: int = 0,
) -> CampaignLog:
    """Heat/cool the sensor next to a reference barometer.

    The reference follows a slow weather swing; the raw reading adds the
    temperature bias and white noise of ``rig.baro_sigma``.
    """
    bias = rig.baro_temp_bias if bias is None else tuple(bias)
    rng = _rng(rig.seed, _CAMPAIGN, stream)
    ts = np.arange(0.0, duration, 1.0 / rate)
    lo, hi = t_range
    temp = lo + (hi - lo) * 0.5 * (1 - np.cos(2 * np.pi * cycles * ts / duration))
    p_ref = P_STD + 300.0 * np.sin(2 * np.pi * ts / duration + rng.uniform(0, 2 * np.pi))
    raw = p_ref + np.polynomial.polynomial.polyval(temp, bias) + rng.normal(0.0, rig.baro_sigma, len(ts))
    return CampaignLog(ts, raw, temp, p_ref)


# ---------------------------------------------------------------- odometry


def simulate_prior(
    gt: GroundTruth,
    drift_rates: Mapping[str, float],
    seed: int = 0,
    imu_tilt: float = 0.0,
) -> Trajectory:
    """Ground truth corrupted by per-meter random-walk drift.

    Over a step of length ``ds`` the x and y errors each gain ``N(0, (xy*ds)^2 / ds)``,
    i.e. variance ``xy**2 * ds``; likewise for z and yaw. The attitude also
    carries the fixed IMU pitch misalignment.
    """
    rates = {k: float(drift_rates.get(k, 0.0)) for k in ("xy", "z", "yaw")}
    extra = set(drift_rates) - set(rates)
    if extra:
        raise ConfigurationError(f"unknown drift rates {sorted(extra)}")
    if any(not (math.isfinite(v) and v >= 0) for v in rates.values()):
        raise InvalidInputError("drift rates must be non-negative")
    traj = gt.trajectory
    ds = np.linalg.norm(np.diff(traj.translations, axis=0), axis=1)
    rng = _rng(seed, _PRIOR)
    steps = rng.normal(0.0, 1.0, (len(ds), 4)) * np.sqrt(ds)[:, None]
    steps *= [rates["xy"], rates["xy"], rates["z"], rates["yaw"]]
    err = np.vstack([np.zeros(4), np.cumsum(steps, axis=0)])
    tilt_t = axis_angle([0.0, 1.0, 0.0], imu_tilt).T
    rotations = np.einsum("nij,njk->nik", np.array([rot_z(e) for e in err[:, 3]]), traj.rotations) @ tilt_t
    return Trajectory(traj.timestamps, rotations, traj.translations + err[:, :3])
