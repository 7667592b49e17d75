"""Plain-text file formats.

Floats are written with ``repr`` so that files round-trip exactly and
identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .altimetry import AltitudeReading
from .barometry import CalibrationModel, PressureStream
from .errors import InvalidInputError
from .pointcloud import PointCloud, estimate_normals
from .trajectory import Trajectory

PRESSURE_HEADER = ["timestamp", "sensor_id", "p_raw", "t"]
ALTITUDE_HEADER = ["timestamp", "delta_z", "variance"]
TRAJECTORY_HEADER = ["timestamp", "x", "y", "z", "qx", "qy", "qz", "qw", "final_error", "iterations", "converged"]


def fmt(x) -> str:
    return repr(float(x))


def read_rows(path, header):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            found = next(reader, None)
            if found is None or [h.strip() for h in found[: len(header)]] != header:
                raise InvalidInputError(f"{path}: expected header {','.join(header)}")
            return [(n + 2, row) for n, row in enumerate(reader) if row and any(c.strip() for c in row)]
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror}") from None


def _float(path, line, text):
    try:
        return float(text)
    except ValueError:
        raise InvalidInputError(f"{path}:{line}: not a number: {text!r}") from None


def write_lines(path, lines):
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- pressure


def read_pressure_log(path) -> dict[str, PressureStream]:
    """Channels keyed by sensor id, each sorted by timestamp."""
    by_id: dict[str, list] = {}
    for line, row in read_rows(path, PRESSURE_HEADER):
        if len(row) != 4:
            raise InvalidInputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
        ts, sid, p, t = row
        by_id.setdefault(sid.strip(), []).append(
            (_float(path, line, ts), _float(path, line, p), _float(path, line, t))
        )
    if not by_id:
        raise InvalidInputError(f"{path}: no samples")
    out = {}
    for sid, rows in by_id.items():
        arr = np.array(sorted(rows))
        out[sid] = PressureStream(sid, arr[:, 0], arr[:, 1], arr[:, 2])
    return out


def write_pressure_log(path, streams: Sequence[PressureStream]):
    rows = []
    for s in streams:
        rows += [(a, s.sensor_id, b, c) for a, b, c in zip(s.timestamps, s.p_raw, s.t)]
    rows.sort(key=lambda r: (r[0], r[1]))
    write_lines(path, [",".join(PRESSURE_HEADER)] + [f"{fmt(a)},{sid},{fmt(b)},{fmt(c)}" for a, sid, b, c in rows])


# ---------------------------------------------------------------- models


def model_to_dict(model: CalibrationModel) -> dict:
    return {
        "order": model.order,
        "pattern": model.pattern,
        "coeffs": [float(c) for c in np.asarray(model.coeffs).ravel()],
        "sigma_p2": float(model.sigma_p2),
    }


def write_model(path, model: CalibrationModel):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n", encoding="utf-8")


def read_model(path) -> CalibrationModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read model {path}: {exc}") from None
    missing = {"order", "pattern", "coeffs", "sigma_p2"} - set(data)
    if missing:
        raise InvalidInputError(f"{path}: missing fields {sorted(missing)}")
    n = int(data["order"]) + 1
    coeffs = np.asarray(data["coeffs"], dtype=float)
    if coeffs.size != n * n:
        raise InvalidInputError(f"{path}: expected {n * n} coefficients, got {coeffs.size}")
    return CalibrationModel(coeffs.reshape(n, n), data["pattern"], float(data["sigma_p2"]), n - 1)


# ---------------------------------------------------------------- altitude


def write_altitude(path, readings: Sequence[AltitudeReading] | None = None, arrays=None):
    """Write readings, or a ``(timestamps, delta_z, variance)`` triple of arrays."""
    if arrays is None:
        arrays = zip(*((r.timestamp, r.delta_z, r.variance) for r in readings)) if readings else ([], [], [])
    t, dz, var = (np.asarray(a, dtype=float) for a in arrays)
    write_lines(path, [",".join(ALTITUDE_HEADER)] + [f"{fmt(a)},{fmt(b)},{fmt(c)}" for a, b, c in zip(t, dz, var)])


def read_altitude(path) -> list[AltitudeReading]:
    out = []
    for line, row in read_rows(path, ALTITUDE_HEADER):
        if len(row) != 3:
            raise InvalidInputError(f"{path}:{line}: expected 3 fields")
        out.append(AltitudeReading(*(_float(path, line, c) for c in row)))
    return out


# ---------------------------------------------------------------- clouds


def read_cloud(path, frame: str = "sensor", k: int = 10) -> PointCloud:
    """``x y z [nx ny nz]`` per line; ``#`` starts a comment. Missing normals are estimated."""
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 6):
            raise InvalidInputError(f"{path}:{n}: expected 3 or 6 values, got {len(parts)}")
        rows.append([_float(path, n, p) for p in parts])
    if not rows:
        raise InvalidInputError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise InvalidInputError(f"{path}: mixed lines with and without normals")
    arr = np.array(rows)
    if arr.shape[1] == 6:
        return PointCloud(arr[:, :3], arr[:, 3:], frame)
    return estimate_normals(PointCloud(arr, None, frame), k=k)


def write_cloud(path, cloud: PointCloud):
    lines = [f"# frame {cloud.frame}"]
    for k, p in enumerate(cloud.points):
        vals = list(p) + (list(cloud.normals[k]) if cloud.has_normals else [])
        lines.append(" ".join(fmt(v) for v in vals))
    write_lines(path, lines)


# ---------------------------------------------------------------- trajectories


def _quat(C) -> np.ndarray:
    q = Rotation.from_matrix(C).as_quat()
    return -q if q[3] < 0 else q


def write_trajectory(path, traj: Trajectory, results: Sequence | None = None):
    """One row per pose; ``results`` optionally supplies IcpResult-like records per row."""
    lines = [",".join(TRAJECTORY_HEADER)]
    for k in range(len(traj)):
        q = _quat(traj.rotations[k])
        cols = [traj.timestamps[k], *traj.translations[k], *q]
        row = ",".join(fmt(v) for v in cols)
        if results is not None and results[k] is not None:
            r = results[k]
            row += f",{fmt(r.final_error)},{int(r.iterations)},{int(bool(r.converged))}"
        else:
            row += ",nan,0,0"
        lines.append(row)
    write_lines(path, lines)


def read_trajectory(path) -> Trajectory:
    t, pos, quats = [], [], []
    for line, row in read_rows(path, TRAJECTORY_HEADER[:8]):
        if len(row) < 8:
            raise InvalidInputError(f"{path}:{line}: expected at least 8 fields")
        vals = [_float(path, line, c) for c in row[:8]]
        t.append(vals[0])
        pos.append(vals[1:4])
        quats.append(vals[4:8])
    if not t:
        raise InvalidInputError(f"{path}: empty trajectory")
    q = np.array(quats)
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidInputError(f"{path}: quaternions must be unit length")
    return Trajectory(t, Rotation.from_quat(q).as_matrix(), pos)


# ---------------------------------------------------------------- misc


def read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, Mapping):
        raise InvalidInputError(f"{path}: expected a JSON object")
    return dict(data)


def write_segments(path, reports: Mapping):
    lines = ["mode,segment_pct"]
    for mode, rep in reports.items():
        lines += [f"{mode},{fmt(e)}" for e in rep.per_segment]
    write_lines(path, lines)
