"""Command-line interface.

File formats
  pressure log   CSV ``timestamp,sensor_id,p_raw,t`` (seconds, id, pascals, Celsius)
  model          JSON ``{"order", "pattern", "coeffs" (row-major), "sigma_p2"}``
  altitude       CSV ``timestamp,delta_z,variance``
  cloud          text ``x y z [nx ny nz]`` per line, ``#`` comments
  trajectory     CSV ``timestamp,x,y,z,qx,qy,qz,qw,final_error,iterations,converged``
  report         CSV ``mode,median_pct,std_pct,n_segments``
  world          JSON with the build_world keys

Exit status is 0 when every requested output was written, 2 for bad
arguments or unreadable inputs, and 1 when the computation itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .altimetry import STANDARD, differential_altitude_arrays
from .barometry import (
    DEFAULT_RATIO,
    PATTERNS,
    FilterConfig,
    PressureStream,
    apply_calibration,
    filter_pressure,
    fit_calibration_arrays,
)
from .errors import BaroIcpError, InvalidInputError
from .evaluation import (
    ALL_MODES,
    REGISTRATION_MODES,
    SCENARIOS,
    RpeReport,
    associate,
    compare_modes,
    register_sequence,
    z_rpe,
)
from .registration import IcpConfig
from .simulation import (
    SensorRigSim,
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

log = logging.getLogger("baroicp")

CALIBRATION_PATTERNS = ("A_p", "A_simple", "A_ind", "A_m", "A'_m", "A_full")
RIG_FIELDS = ("lidar_range", "lidar_sigma", "points_per_scan", "baro_sigma", "imu_tilt")


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit status 2."""


# ---------------------------------------------------------------- helpers


def _inputs(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


def _output(path, directory=False):
    p = Path(path)
    parent = p if directory else p.parent
    if directory:
        parent.mkdir(parents=True, exist_ok=True)
    elif not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return p


def _channel(streams, sensor_id, exclude=(), role="sensor") -> PressureStream:
    if sensor_id is not None:
        if sensor_id not in streams:
            raise UsageError(f"{role} channel {sensor_id!r} not found (channels: {', '.join(sorted(streams))})")
        return streams[sensor_id]
    rest = [k for k in streams if k not in exclude]
    if len(rest) != 1:
        raise UsageError(f"cannot pick the {role} channel among {sorted(rest)}; pass --{role}_id")
    return streams[rest[0]]


def _icp_config(args) -> IcpConfig:
    return IcpConfig(**{f.name: getattr(args, f.name) for f in fields(IcpConfig)})


def _add_icp_flags(p):
    d = IcpConfig()
    for f in fields(IcpConfig):
        p.add_argument(f"--{f.name}", type=type(getattr(d, f.name)), default=getattr(d, f.name))


def _add_rig_flags(p):
    for name in RIG_FIELDS:
        p.add_argument(f"--{name}", type=type(getattr(SensorRigSim(), name)), default=None)


def _rig(args, base: SensorRigSim) -> SensorRigSim:
    overrides = {k: getattr(args, k) for k in RIG_FIELDS if getattr(args, k) is not None}
    return replace(base, seed=args.seed, **overrides)


def _residual_stats(model, p_raw, t, p_ref):
    r = apply_calibration(model, p_raw, t) - p_ref
    return float(np.median(np.abs(r))), float(np.std(r))


# ---------------------------------------------------------------- subcommands


def cmd_calibrate(args) -> int:
    _inputs(args.log)
    out = _output(args.out)
    streams = fio.read_pressure_log(args.log)
    if args.reference not in streams:
        raise UsageError(
            f"reference channel {args.reference!r} not found in {args.log} (channels: {', '.join(sorted(streams))})"
        )
    ref = streams[args.reference]
    sensor = _channel(streams, args.sensor_id, exclude=(args.reference,))
    if sensor.timestamps[0] < ref.timestamps[0] or sensor.timestamps[-1] > ref.timestamps[-1]:
        raise UsageError("reference channel does not cover the sensor time span")
    p_ref = np.interp(sensor.timestamps, ref.timestamps, ref.p_raw)

    patterns = CALIBRATION_PATTERNS if args.all_patterns else (args.pattern,)
    fits = {}
    for name in dict.fromkeys(patterns + ("A_full",)):
        try:
            fits[name] = fit_calibration_arrays(sensor.p_raw, sensor.t, p_ref, name).model
        except BaroIcpError as exc:
            if name in patterns:
                raise
            log.info("reference fit %s unavailable: %s", name, exc)

    print("pattern,median_abs_pa,std_pa")
    stats = {name: _residual_stats(fits[name], sensor.p_raw, sensor.t, p_ref) for name in fits}
    for name in patterns:
        med, std = stats[name]
        print(f"{name},{med:.4f},{std:.4f}")
    if "A_full" in stats:
        floor = stats["A_full"][0]
        for name in patterns:
            if stats[name][0] > 2.0 * floor and stats[name][0] > 1e-9:
                print(
                    f"warning: pattern {name} leaves a median residual of {stats[name][0]:.3g} Pa, "
                    f"more than twice the full model ({floor:.3g} Pa); temperature dependence is not captured",
                    file=sys.stderr,
                )
    fio.write_model(out, fits[args.pattern])
    return 0


def _load_channel(path, sensor_id, model_path, role):
    _inputs(path, model_path)
    stream = _channel(fio.read_pressure_log(path), sensor_id, role=role)
    model = fio.read_model(model_path) if model_path else None
    p = stream.p_raw if model is None else apply_calibration(model, stream.p_raw, stream.t)
    return stream, model, np.asarray(p, dtype=float)


def _filter_config(args, model):
    if args.process_variance is not None or args.observation_variance is not None:
        if args.process_variance is None or args.observation_variance is None:
            raise UsageError("give both --process_variance and --observation_variance")
        return FilterConfig(args.process_variance, args.observation_variance)
    if model is not None and model.sigma_p2 > 0:
        return FilterConfig.from_model(model, args.ratio)
    return None


def cmd_filter(args) -> int:
    out = _output(args.out)
    stream, model, p = _load_channel(args.log, args.sensor_id, args.model, "sensor")
    cfg = _filter_config(args, model)
    if cfg is None:
        raise UsageError("no filter variances: pass a model with sigma_p2 > 0 or both variance flags")
    filtered = filter_pressure(p, cfg)
    fio.write_pressure_log(out, [PressureStream(stream.sensor_id, stream.timestamps, filtered, stream.t)])
    return 0


def cmd_altitude(args) -> int:
    _inputs(args.base, args.rover, args.base_model, args.rover_model)
    out = _output(args.out)
    channels = []
    for role, path, sid, mpath in (
        ("base", args.base, args.base_id, args.base_model),
        ("rover", args.rover, args.rover_id, args.rover_model),
    ):
        stream, model, p = _load_channel(path, sid, mpath, role)
        cfg = None if args.no_filter else _filter_config(args, model)
        if cfg is not None:
            p = filter_pressure(p, cfg)
        var = model.sigma_p2 if model is not None else 0.0
        channels.append((stream.pairs(p), var))
    (b, vb), (r, vr) = channels
    t, dz, var = differential_altitude_arrays(b, r, args.T_v_bar, STANDARD, vb, vr)
    fio.write_altitude(out, arrays=(t, dz, var))
    return 0


def _world_and_truth(args):
    if args.world:
        _inputs(args.world)
        world = build_world(fio.read_json(args.world))
        gt = corridor_ground_truth(world) if world.kind == "corridor" else shaft_ground_truth(world)
        return world, gt, SensorRigSim(), {"xy": 0.01, "z": 0.02, "yaw": 0.002}
    sc = SCENARIOS[args.scenario]()
    return sc.world, sc.ground_truth, sc.rig, dict(sc.drift_rates)


def cmd_simulate(args) -> int:
    out = _output(args.out_dir, directory=True)
    world, gt, base_rig, rates = _world_and_truth(args)
    rig = _rig(args, base_rig)
    fio.write_lines(out / "world.json", [json.dumps(dict(world.spec), sort_keys=True)])
    fio.write_trajectory(out / "ground_truth.csv", gt.trajectory)
    prior = simulate_prior(gt, rates, args.seed, rig.imu_tilt)
    fio.write_trajectory(out / "prior.csv", prior)
    base, rover = simulate_baro(gt, rig, args.T_ambient)
    fio.write_pressure_log(out / "pressure.csv", [base, rover])
    for k, (stream, bias) in enumerate(((base, (0.0,)), (rover, rig.baro_temp_bias))):
        camp = simulate_calibration_campaign(rig, bias=bias, stream=k)
        fio.write_pressure_log(
            out / f"calibration_{stream.sensor_id}.csv",
            [
                PressureStream(stream.sensor_id, camp.timestamps, camp.p_raw, camp.t),
                PressureStream("reference", camp.timestamps, camp.p_ref, camp.t),
            ],
        )
    fio.write_lines(out / "exclusions.csv", ["start,end"] + [f"{fio.fmt(a)},{fio.fmt(b)}" for a, b in gt.exclusions])
    scan_dir = out / "scans"
    scan_dir.mkdir(exist_ok=True)
    rows = ["index,timestamp,file,gx,gy,gz"]
    for idx in gt.scan_indices:
        pose = gt.trajectory.pose(int(idx))
        cloud = render_scan(world, pose, rig, int(idx))
        name = f"scan_{int(idx):06d}.txt"
        fio.write_cloud(scan_dir / name, cloud)
        g = measured_gravity(pose, rig)
        rows.append(f"{int(idx)},{fio.fmt(gt.trajectory.timestamps[idx])},{name},{','.join(fio.fmt(v) for v in g)}")
    fio.write_lines(out / "scans.csv", rows)
    print(f"wrote {len(gt.scan_indices)} scans and pressure logs to {out}")
    return 0


def _read_scan_index(path):
    rows = fio.read_rows(path, ["index", "timestamp", "file", "gx", "gy", "gz"])
    if not rows:
        raise InvalidInputError(f"{path}: no scans")
    t = np.array([float(r[1]) for _, r in rows])
    files = [Path(path).parent / "scans" / r[2] for _, r in rows]
    g = np.array([[float(v) for v in r[3:6]] for _, r in rows])
    return t, files, g


def cmd_register(args) -> int:
    _inputs(args.scans, args.prior, args.altitude)
    out = _output(args.out)
    cfg = _icp_config(args)
    t, files, gravities = _read_scan_index(args.scans)
    _inputs(*files)
    prior = fio.read_trajectory(args.prior)
    scan_traj = Trajectory(t, np.tile(np.eye(3), (len(t), 1, 1)), np.zeros((len(t), 3)))
    ie, ip = associate(scan_traj, prior)
    if len(ie) != len(t):
        raise UsageError("prior trajectory does not cover every scan timestamp")
    priors = [prior.pose(int(i)) for i in ip]
    altitudes = None
    if args.altitude:
        readings = fio.read_altitude(args.altitude)
        ta = np.array([r.timestamp for r in readings])
        za = np.array([r.delta_z for r in readings])
        if t[0] < ta[0] or t[-1] > ta[-1]:
            raise UsageError("altitude file does not cover the scan time span")
        altitudes = np.interp(t, ta, za)
    elif args.mode == "three_dof" or args.mode.endswith("_altitude"):
        raise UsageError(f"mode {args.mode} needs --altitude")
    scans = [fio.read_cloud(f) for f in files]
    run = register_sequence(scans, priors, altitudes, gravities, args.mode, cfg, args.map_scans)
    fio.write_trajectory(out, Trajectory.from_poses(zip(t, run.poses)), run.results)
    if run.failures:
        print(f"{len(run.failures)} scan(s) failed to register: {sorted(run.failures)}", file=sys.stderr)
    return 0


def _read_exclusions(path):
    if path is None:
        return ()
    _inputs(path)
    return tuple((float(r[0]), float(r[1])) for _, r in fio.read_rows(path, ["start", "end"]))


def cmd_evaluate(args) -> int:
    _inputs(args.estimate, args.ground_truth)
    out = _output(args.out)
    est = fio.read_trajectory(args.estimate)
    gt = fio.read_trajectory(args.ground_truth)
    rep = z_rpe(est, gt, args.segment_distance, _read_exclusions(args.exclusions))
    _write_reports(out, {args.label: rep})
    print(f"{args.label}: median {rep.median:.4f} %, std {rep.std:.4f} %, {len(rep)} segments")
    return 0


def _write_reports(path, reports: dict[str, RpeReport]):
    lines = ["mode,median_pct,std_pct,n_segments"]
    lines += [f"{m},{fio.fmt(r.median)},{fio.fmt(r.std)},{len(r)}" for m, r in reports.items()]
    fio.write_lines(path, lines)


def cmd_reproduce(args) -> int:
    out = _output(args.out_dir, directory=True)
    sc = SCENARIOS[args.scenario]()
    n = args.seeds if args.seeds is not None else len(sc.seeds)
    seeds = tuple(range(args.seed, args.seed + n))
    modes = tuple(args.modes.split(",")) if args.modes else ALL_MODES
    unknown = set(modes) - set(ALL_MODES)
    if unknown:
        raise UsageError(f"unknown modes {sorted(unknown)}; choose from {', '.join(ALL_MODES)}")
    result = compare_modes(sc, modes, seeds)
    (out / "report.csv").write_text(result.csv(), encoding="utf-8")
    (out / "boxplot.dat").write_text(result.boxplot_data(), encoding="utf-8")
    fio.write_segments(out / "segments.csv", result.reports)
    lines = ["mode,z_degenerate_fraction"] + [f"{m},{fio.fmt(v)}" for m, v in result.z_degenerate.items()]
    fio.write_lines(out / "degeneracy.csv", lines)
    print(f"scenario {args.scenario}, seeds {seeds[0]}..{seeds[-1]}")
    print(f"{'mode':<20}{'median %':>10}{'std %':>10}{'segments':>10}{'z degenerate':>14}")
    for m, r in result.reports.items():
        print(f"{m:<20}{r.median:>10.3f}{r.std:>10.3f}{len(r):>10d}{result.z_degenerate[m]:>14.2f}")
    failed = {s: f for s, f in result.failures.items() if f}
    if failed:
        total = sum(len(f) for f in failed.values())
        print(f"{total} scan(s) excluded after registration failures (lift landings restart the map)")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="baroicp",
        description="Barometric altitude and gravity-constrained ICP toolkit.",
        epilog=__doc__.split("\n\n", 1)[1].split("\n\nExit")[0],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    common.add_argument("--log_level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="fit a temperature compensation model")
    p.add_argument("--log", required=True, help="pressure log CSV")
    p.add_argument("--reference", required=True, help="sensor_id of the reference channel")
    p.add_argument("--sensor_id", help="channel to calibrate (default: the only other channel)")
    p.add_argument("--pattern", default="A_simple", choices=sorted(PATTERNS) + ["A_m_prime"])
    p.add_argument("--all_patterns", "--all-patterns", action="store_true",
                   help="print residual statistics for every pattern")
    p.add_argument("--out", required=True, help="model JSON to write")
    p.set_defaults(func=cmd_calibrate)

    def filter_flags(q):
        q.add_argument("--process_variance", type=float)
        q.add_argument("--observation_variance", type=float)
        q.add_argument("--ratio", type=float, default=DEFAULT_RATIO,
                       help="observation/process variance ratio when derived from a model")

    p = sub.add_parser("filter", parents=[common], help="calibrate and smooth one pressure channel")
    p.add_argument("--log", required=True)
    p.add_argument("--sensor_id")
    p.add_argument("--model", help="calibration model JSON applied before filtering")
    filter_flags(p)
    p.add_argument("--out", required=True, help="filtered pressure log CSV")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("altitude", parents=[common], help="differential altitude of a rover over a base")
    p.add_argument("--base", required=True)
    p.add_argument("--rover", required=True)
    p.add_argument("--base_id")
    p.add_argument("--rover_id")
    p.add_argument("--base_model")
    p.add_argument("--rover_model")
    p.add_argument("--T_v_bar", type=float, default=288.15, help="mean virtual temperature, kelvin")
    p.add_argument("--no_filter", action="store_true")
    filter_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_altitude)

    p = sub.add_parser("simulate", parents=[common], help="generate scans, pressure logs and trajectories")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", choices=sorted(SCENARIOS), default="corridor3")
    src.add_argument("--world", help="world spec JSON")
    p.add_argument("--T_ambient", type=float, default=288.15)
    _add_rig_flags(p)
    p.add_argument("--out_dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("register", parents=[common], help="scan-to-map registration of a scan sequence")
    p.add_argument("--scans", required=True, help="scans.csv written by simulate")
    p.add_argument("--prior", required=True, help="prior trajectory CSV")
    p.add_argument("--altitude", help="altitude CSV")
    p.add_argument("--mode", choices=REGISTRATION_MODES, default="three_dof")
    p.add_argument("--map_scans", type=int, default=20)
    _add_icp_flags(p)
    p.add_argument("--out", required=True, help="trajectory CSV")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="z drift of a trajectory against ground truth")
    p.add_argument("--estimate", required=True)
    p.add_argument("--ground_truth", required=True)
    p.add_argument("--segment_distance", type=float, default=5.0)
    p.add_argument("--exclusions", help="CSV start,end of excluded time windows")
    p.add_argument("--label", default="estimate")
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", parents=[common], help="run the mode comparison on a named scenario")
    p.add_argument("scenario", choices=sorted(SCENARIOS))
    p.add_argument("--seeds", type=int, help="number of seeds starting at --seed")
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(ALL_MODES)}")
    p.add_argument("--out_dir", required=True)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BaroIcpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
