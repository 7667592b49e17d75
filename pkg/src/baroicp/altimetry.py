"""Relative altitude from a static base barometer and a mobile rover barometer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, OutOfRangeError


@dataclass(frozen=True)
class AtmosphereConstants:
    R_dry: float = 287.058  # J/(kg K)
    g: float = 9.80665  # m/s^2
    gamma: float = 0.0065  # K/m
    p_std: float = 101325.0  # Pa
    T_std: float = 288.15  # K

    def __post_init__(self):
        for name in ("R_dry", "g", "gamma", "p_std", "T_std"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be positive, got {v}")

    def scale_height(self, T):
        """R_dry * T / g, in meters."""
        return self.R_dry * T / self.g


STANDARD = AtmosphereConstants()


@dataclass(frozen=True)
class AltitudeReading:
    timestamp: float
    delta_z: float
    variance: float = 0.0


def _positive(name, *values):
    for v in values:
        a = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise InvalidInputError(f"{name} must be positive and finite")


def log_pressure_ratio(p0, p1):
    """``ln(p0 / p1)``, accurate for nearly equal pressures and exactly antisymmetric."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    hi = np.maximum(p0, p1)
    lo = np.minimum(p0, p1)
    mag = np.log1p((hi - lo) / lo)
    return np.where(p0 >= p1, mag, -mag)


def hypsometric_delta_z(p0, p1, T_v_bar, consts: AtmosphereConstants = STANDARD):
    """Altitude of the ``p1`` sensor above the ``p0`` sensor, constant layer temperature."""
    _positive("pressure", p0, p1)
    _positive("T_v_bar", T_v_bar)
    dz = consts.scale_height(np.asarray(T_v_bar, dtype=float)) * log_pressure_ratio(p0, p1)
    return dz.item() if np.ndim(dz) == 0 else dz


def barometric_formula_delta_z(p0, p1, T0, consts: AtmosphereConstants = STANDARD):
    """Altitude difference under a linear lapse rate, T0 taken at the ``p0`` level.

    Evaluated as ``-(T0/gamma) * expm1(k * log(p1/p0))`` with
    ``k = R_dry * gamma / g`` so the small-lapse limit stays accurate.
    """
    _positive("pressure", p0, p1)
    _positive("T0", T0)
    k = consts.R_dry * consts.gamma / consts.g
    dz = -(np.asarray(T0, dtype=float) / consts.gamma) * np.expm1(-k * log_pressure_ratio(p0, p1))
    return dz.item() if np.ndim(dz) == 0 else dz


def _as_stream(stream, name):
    arr = np.asarray(stream, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise InvalidInputError(f"{name} must be a non-empty sequence of (timestamp, pascals)")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if np.any(np.diff(arr[:, 0]) < 0):
        raise InvalidInputError(f"{name} timestamps must be sorted")
    return arr[:, 0], arr[:, 1]


def differential_altitude_arrays(
    base: Sequence,
    rover: Sequence,
    T_v_bar: float,
    consts: AtmosphereConstants = STANDARD,
    base_variance: float = 0.0,
    rover_variance: float = 0.0,
):
    """Vectorized form of :func:`differential_altitude`.

    Returns ``(timestamps, delta_z, variance)`` arrays aligned with the rover stream.
    """
    tb, pb = _as_stream(base, "base")
    tr, pr = _as_stream(rover, "rover")
    outside = (tr < tb[0]) | (tr > tb[-1])
    if np.any(outside):
        bad = float(tr[np.argmax(outside)])
        raise OutOfRangeError(
            f"rover timestamp {bad!r} outside base coverage [{tb[0]!r}, {tb[-1]!r}]", bad
        )
    p0 = np.interp(tr, tb, pb)
    dz = hypsometric_delta_z(p0, pr, T_v_bar, consts)
    h = consts.scale_height(T_v_bar)
    var = h * h * (base_variance / p0**2 + rover_variance / pr**2)
    return tr, np.atleast_1d(dz), np.atleast_1d(var)


def differential_altitude(
    base: Sequence,
    rover: Sequence,
    T_v_bar: float,
    consts: AtmosphereConstants = STANDARD,
    base_variance: float = 0.0,
    rover_variance: float = 0.0,
) -> list[AltitudeReading]:
    """Rover altitude relative to the base station, one reading per rover sample.

    Base pressure is linearly interpolated at each rover timestamp. The reading
    variance is first-order propagation of the two per-sensor pressure variances.
    """
    t, dz, var = differential_altitude_arrays(
        base, rover, T_v_bar, consts, base_variance, rover_variance
    )
    return [AltitudeReading(float(a), float(b), float(c)) for a, b, c in zip(t, dz, var)]
