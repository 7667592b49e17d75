"""Vertical drift metric and the end-to-end mode comparison."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .altimetry import STANDARD, AtmosphereConstants, differential_altitude_arrays
from .barometry import DEFAULT_RATIO, FilterConfig, apply_calibration, filter_pressure, fit_calibration_arrays
from .errors import AssociationError, BaroIcpError, InvalidInputError, NoOverlapError
from .pointcloud import PointCloud, RigidTransform, SpatialIndex, gravity_rotation, rot_z, yaw_of
from .registration import ConstraintMode, IcpConfig, icp
from .simulation import (
    GroundTruth,
    SensorRigSim,
    World,
    build_world,
    corridor_ground_truth,
    measured_gravity,
    render_scan,
    shaft_ground_truth,
    simulate_baro,
    simulate_calibration_campaign,
    simulate_prior,
)
from .trajectory import Trajectory

ASSOCIATION_TOLERANCE = 0.05
PRIOR_ODOMETRY = "prior_odometry"
REGISTRATION_MODES = ("six_dof", "four_dof", "three_dof", "six_dof_altitude", "four_dof_altitude")
ALL_MODES = REGISTRATION_MODES + (PRIOR_ODOMETRY,)


@dataclass(frozen=True)
class RpeReport:
    per_segment: np.ndarray
    median: float
    std: float
    segment_distance: float

    @classmethod
    def from_errors(cls, errors, segment_distance: float) -> "RpeReport":
        e = np.asarray(errors, dtype=float).reshape(-1)
        if np.any(e < 0):
            raise InvalidInputError("segment errors are non-negative")
        if e.size == 0:
            return cls(e, math.nan, math.nan, segment_distance)
        return cls(e, float(np.median(e)), float(np.std(e)), segment_distance)

    def __len__(self):
        return len(self.per_segment)


def associate(estimate: Trajectory, ground_truth: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE):
    """Nearest-timestamp pairs ``(i_est, i_gt)`` closer than ``tolerance`` seconds."""
    ts = ground_truth.timestamps
    te = estimate.timestamps
    if len(te) == 0 or len(ts) == 0:
        raise AssociationError("cannot associate an empty trajectory")
    j = np.clip(np.searchsorted(ts, te), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(te), int)
    if len(ts) > 1:
        left_closer = np.abs(te - ts[j - 1]) <= np.abs(ts[j] - te)
        j = np.where(left_closer, j - 1, j)
    ok = np.abs(ts[j] - te) <= tolerance
    if not ok.any():
        raise AssociationError("trajectories share no timestamps within tolerance")
    return np.flatnonzero(ok), j[ok]


def _runs(times, exclusions):
    """Label consecutive samples; a new label starts whenever an exclusion window intervenes."""
    labels = np.zeros(len(times), dtype=int)
    for a, b in exclusions:
        labels += (times > a).astype(int) + (times > b).astype(int)
    return labels


def z_rpe(
    estimate: Trajectory,
    ground_truth: Trajectory,
    segment_distance: float = 5.0,
    exclusions: Sequence = (),
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> RpeReport:
    """Relative vertical error, in percent of the distance travelled.

    For every associated sample ``i`` the segment ends at the first ``j`` whose
    along-path ground-truth distance from ``i`` reaches ``segment_distance``.
    Samples inside an exclusion window are dropped and no segment spans one.
    """
    if not segment_distance > 0:
        raise InvalidInputError("segment_distance must be positive")
    ie, ig = associate(estimate, ground_truth, tolerance)
    s_full = ground_truth.path_length()
    if s_full[-1] < segment_distance:
        raise InvalidInputError("ground truth path is shorter than one segment")
    t = ground_truth.timestamps[ig]
    keep = np.ones(len(t), dtype=bool)
    for a, b in exclusions:
        keep &= ~((t >= a) & (t <= b))
    ie, ig, t = ie[keep], ig[keep], t[keep]
    s = s_full[ig]
    z_est = estimate.translations[ie, 2]
    z_gt = ground_truth.translations[ig, 2]
    labels = _runs(t, exclusions)
    errors = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        sr = s[idx]
        ends = np.searchsorted(sr, sr + segment_distance - 1e-12 * segment_distance, side="left")
        for a, b in zip(range(len(idx)), ends):
            if b >= len(idx):
                break
            i, j = idx[a], idx[b]
            d = s[j] - s[i]
            errors.append(abs((z_est[j] - z_est[i]) - (z_gt[j] - z_gt[i])) / d * 100.0)
    return RpeReport.from_errors(errors, segment_distance)


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class Scenario:
    name: str
    world: World
    ground_truth: GroundTruth
    rig: SensorRigSim
    drift_rates: Mapping = field(default_factory=lambda: {"xy": 0.0, "z": 0.0, "yaw": 0.0})
    T_ambient: float = 288.15
    consts: AtmosphereConstants = STANDARD
    icp: IcpConfig = IcpConfig()
    segment_distance: float = 5.0
    map_scans: int = 20
    pattern: str = "A_simple"
    filter_ratio: float = DEFAULT_RATIO
    seeds: tuple = tuple(range(10))


def corridor3_scenario(**overrides) -> Scenario:
    """Three 100 m corridor levels, 4 m apart, with a 0.02 rad gravity misalignment."""
    world = build_world({"floors": 3, "floor_height": 4.0, "corridor_length": 100.0, "corridor_width": 2.0})
    gt = corridor_ground_truth(world, scan_spacing=2.0)
    rig = SensorRigSim(points_per_scan=600, imu_tilt=0.02, atm_drift=(0.0, 50.0 / 600.0))
    base = Scenario("corridor3", world, gt, rig, {"xy": 0.01, "z": 0.02, "yaw": 0.002})
    return replace(base, **overrides)


def shaft_scenario(**overrides) -> Scenario:
    world = build_world({"shaft_depth": 20.0, "shaft_radius": 2.0})
    gt = shaft_ground_truth(world)
    rig = SensorRigSim(points_per_scan=600, lidar_range=15.0)
    # continuous vertical motion: a faster filter keeps the altitude lag short
    base = Scenario(
        "shaft", world, gt, rig, {"xy": 0.01, "z": 0.02, "yaw": 0.002}, filter_ratio=1000.0, seeds=(0, 1, 2)
    )
    return replace(base, **overrides)


SCENARIOS = {"corridor3": corridor3_scenario, "shaft": shaft_scenario}


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class AltitudeSeries:
    timestamps: np.ndarray
    delta_z: np.ndarray
    variance: np.ndarray


def altitude_from_baro(
    gt: GroundTruth,
    rig: SensorRigSim,
    T_ambient: float = 288.15,
    consts: AtmosphereConstants = STANDARD,
    pattern: str = "A_simple",
    filter_ratio: float | None = DEFAULT_RATIO,
) -> AltitudeSeries:
    """Calibrate both barometers from a bench campaign, filter, and difference them.

    ``filter_ratio=None`` skips filtering.
    """
    base, rover = simulate_baro(gt, rig, T_ambient, consts)
    out = []
    for stream, bias, k in ((base, (0.0,), 0), (rover, rig.baro_temp_bias, 1)):
        log = simulate_calibration_campaign(rig, bias=bias, stream=k)
        model = fit_calibration_arrays(log.p_raw, log.t, log.p_ref, pattern).model
        p = apply_calibration(model, stream.p_raw, stream.t)
        # a noise-free channel has nothing to filter
        if filter_ratio is not None and model.sigma_p2 > 0:
            p = filter_pressure(p, FilterConfig.from_model(model, filter_ratio))
        out.append((stream.pairs(p), model.sigma_p2))
    (b, vb), (r, vr) = out
    t, dz, var = differential_altitude_arrays(b, r, T_ambient, consts, vb, vr)
    return AltitudeSeries(t, dz, var)


def altitude_pipeline(scenario: Scenario, rig: SensorRigSim) -> AltitudeSeries:
    return altitude_from_baro(
        scenario.ground_truth, rig, scenario.T_ambient, scenario.consts, scenario.pattern, scenario.filter_ratio
    )


def step_ground_truth(steps: int = 10, step_height: float = 0.03, dwell: float = 30.0, rate: float = 10.0,
                      move: float = 1.0) -> tuple[GroundTruth, np.ndarray]:
    """Rover raised by ``step_height`` and lowered again ``steps`` times.

    Returns the ground truth and a mask of steady-state samples: the second
    half of every stationary plateau.
    """
    dt = 1.0 / rate
    n_dwell, n_move = int(round(dwell * rate)), int(round(move * rate))
    z, steady = [], []
    level = 0.0
    for k in range(2 * steps + 1):
        target = step_height if k % 2 else 0.0
        if k:
            z += list(level + (target - level) * np.arange(1, n_move + 1) / n_move)
            steady += [False] * n_move
        level = target
        z += [level] * n_dwell
        steady += [False] * (n_dwell - n_dwell // 2) + [True] * (n_dwell // 2)
    z = np.asarray(z)
    ts = np.arange(len(z)) * dt
    traj = Trajectory(ts, np.tile(np.eye(3), (len(z), 1, 1)), np.column_stack([np.zeros((len(z), 2)), z]))
    return GroundTruth(traj, (0.0,)), np.asarray(steady)


def step_experiment(rig: SensorRigSim = SensorRigSim(), filter_ratio: float | None = DEFAULT_RATIO, **kwargs) -> np.ndarray:
    """Absolute steady-state altitude errors, meters, for the up/down step run."""
    gt, steady = step_ground_truth(**kwargs)
    dz = altitude_from_baro(gt, rig, filter_ratio=filter_ratio).delta_z
    return np.abs(dz - gt.trajectory.translations[:, 2])[steady]


def _gravity_aligned_guess(T: RigidTransform, gravity) -> RigidTransform:
    Cg = gravity_rotation(gravity)
    return RigidTransform(rot_z(yaw_of(T.rotation @ Cg.T)) @ Cg, T.translation)


@dataclass
class RunLog:
    poses: list
    failures: set
    # IcpResult per scan, None where no registration ran
    results: list = field(default_factory=list)
    z_degenerate: int = 0
    registrations: int = 0


def register_sequence(
    scans: Sequence[PointCloud],
    priors: Sequence[RigidTransform],
    altitudes: Sequence[float] | None,
    gravities: Sequence,
    mode: str,
    cfg: IcpConfig = IcpConfig(),
    map_scans: int = 20,
) -> RunLog:
    """Scan-to-map registration against the union of the last ``map_scans`` registered scans.

    ``mode`` is a registration mode name, optionally suffixed with ``_altitude``
    to inject the altitude into the prior only. The guess for scan ``k`` chains
    the odometry increment onto the previous registered pose.
    """
    with_alt = mode.endswith("_altitude") or mode == "three_dof"
    cmode = ConstraintMode(mode.removesuffix("_altitude"))
    if with_alt and altitudes is None:
        raise InvalidInputError(f"mode {mode} needs altitudes")
    window: deque = deque(maxlen=map_scans)
    log = RunLog([], set())
    for k, scan in enumerate(scans):
        alt = float(altitudes[k]) if with_alt else None
        if k == 0:
            guess = priors[0]
        else:
            guess = log.poses[-1] @ (priors[k - 1].inverse() @ priors[k])
        seed_pose = guess
        if cmode is not ConstraintMode.six_dof:
            seed_pose = _gravity_aligned_guess(seed_pose, gravities[k])
        if alt is not None:
            seed_pose = RigidTransform(seed_pose.rotation, [*seed_pose.translation[:2], alt])
        pose = seed_pose
        result = None
        if window:
            ref = PointCloud.concatenate(window)
            try:
                res = icp(scan, ref, guess, alt, gravities[k], cmode, cfg, SpatialIndex(ref))
            except NoOverlapError:
                # nothing mapped nearby, e.g. after a lift ride: restart the local map here
                log.failures.add(k)
            except BaroIcpError:
                log.failures.add(k)
                log.poses.append(seed_pose)
                log.results.append(None)
                continue
            else:
                pose, result = res.transform, res
                log.registrations += 1
                log.z_degenerate += "z" in res.degenerate_directions
        log.poses.append(pose)
        log.results.append(result)
        window.append(scan.transformed(pose, "map"))
    return log


@dataclass(frozen=True)
class SeedRun:
    seed: int
    ground_truth: Trajectory
    trajectories: dict
    failures: dict
    z_degenerate: dict


def run_seed(scenario: Scenario, seed: int, modes: Iterable[str] = ALL_MODES) -> SeedRun:
    gt = scenario.ground_truth
    rig = replace(scenario.rig, seed=seed)
    idx = gt.scan_indices
    truth = gt.trajectory.subset(idx)
    prior = simulate_prior(gt, scenario.drift_rates, seed, rig.imu_tilt).subset(idx)
    priors = prior.poses()
    trajectories, failures, degenerate = {}, {}, {}
    modes = list(modes)
    reg_modes = [m for m in modes if m != PRIOR_ODOMETRY]
    if reg_modes:
        scans = [render_scan(scenario.world, truth.pose(k), rig, int(i)) for k, i in enumerate(idx)]
        gravities = [measured_gravity(truth.pose(k), rig) for k in range(len(idx))]
        alt = altitude_pipeline(scenario, rig).delta_z[idx]
    for m in modes:
        if m == PRIOR_ODOMETRY:
            trajectories[m] = prior
            failures[m] = set()
            degenerate[m] = 0.0
            continue
        if m not in REGISTRATION_MODES:
            raise InvalidInputError(f"unknown mode {m!r}; expected one of {ALL_MODES}")
        log = register_sequence(scans, priors, alt, gravities, m, scenario.icp, scenario.map_scans)
        trajectories[m] = Trajectory.from_poses(zip(truth.timestamps, log.poses))
        failures[m] = log.failures
        degenerate[m] = log.z_degenerate / max(log.registrations, 1)
    return SeedRun(seed, truth, trajectories, failures, degenerate)


@dataclass(frozen=True)
class Comparison:
    scenario: str
    reports: dict
    failures: dict
    z_degenerate: dict

    def csv(self) -> str:
        lines = ["mode,median_pct,std_pct,n_segments"]
        for m, r in self.reports.items():
            lines.append(f"{m},{r.median!r},{r.std!r},{len(r)}")
        return "\n".join(lines) + "\n"

    def boxplot_data(self) -> str:
        """gnuplot-friendly rows: index mode min q1 median q3 max."""
        lines = ["# index mode min q1 median q3 max"]
        for k, (m, r) in enumerate(self.reports.items()):
            if len(r):
                q = np.quantile(r.per_segment, [0.0, 0.25, 0.5, 0.75, 1.0])
            else:
                q = [math.nan] * 5
            lines.append(" ".join([str(k), m, *(repr(float(v)) for v in q)]))
        return "\n".join(lines) + "\n"


def compare_modes(
    scenario: Scenario,
    modes: Iterable[str] = ALL_MODES,
    seeds: Iterable[int] | None = None,
) -> Comparison:
    """Run every mode on identical simulated data and pool segment errors over seeds.

    Scans that failed to register in any mode are removed from every mode
    before computing the metric.
    """
    modes = list(dict.fromkeys(modes))
    seeds = scenario.seeds if seeds is None else tuple(seeds)
    pooled = {m: [] for m in modes}
    failures, degenerate = {}, {m: [] for m in modes}
    for seed in seeds:
        run = run_seed(scenario, seed, modes)
        bad = sorted(set().union(*run.failures.values()))
        failures[seed] = bad
        keep = np.setdiff1d(np.arange(len(run.ground_truth)), bad)
        gt = run.ground_truth.subset(keep)
        for m in modes:
            rep = z_rpe(
                run.trajectories[m].subset(keep), gt,
                scenario.segment_distance, scenario.ground_truth.exclusions,
            )
            pooled[m].append(rep.per_segment)
            degenerate[m].append(run.z_degenerate[m])
    reports = {
        m: RpeReport.from_errors(np.concatenate(pooled[m]), scenario.segment_distance) for m in modes
    }
    return Comparison(scenario.name, reports, failures, {m: float(np.mean(v)) for m, v in degenerate.items()})
