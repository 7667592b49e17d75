"""Temperature compensation and filtering of MEMS pressure readings.

A calibration model maps a raw pressure ``p`` and sensor temperature ``t``
(Celsius) to a calibrated pressure through a bivariate polynomial

    p_cal = sum_ij c[i, j] * p**i * t**j,    0 <= i, j <= 3

where only the entries allowed by a named sparsity pattern are free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateFitError, InvalidInputError

ORDER = 3
MAX_CONDITION = 1e12

MANUFACTURER = "A'_m"

# observation to process variance ratio of the default filter; about 10 s time constant at 10 Hz
DEFAULT_RATIO = 1e4


def _mask(cells):
    m = np.zeros((ORDER + 1, ORDER + 1), dtype=bool)
    for i, j in cells:
        m[i, j] = True
    m.setflags(write=False)
    return m


_COL0 = [(i, 0) for i in range(ORDER + 1)]
_MANUF_CELLS = [(i, j) for i in range(3) for j in range(2)] + [(3, 0)]

# row index = power of raw pressure, column index = power of temperature
PATTERNS = {
    "A_p": _mask(_COL0),
    "A_simple": _mask(_COL0 + [(0, 1)]),
    "A_ind": _mask(_COL0 + [(0, 1), (0, 2), (0, 3)]),
    "A_m": _mask(_MANUF_CELLS),
    MANUFACTURER: _mask(_MANUF_CELLS),
    "A_full": _mask([(i, j) for i in range(ORDER + 1) for j in range(ORDER + 1)]),
}

PATTERN_ALIASES = {"A_m_prime": MANUFACTURER, "A'm": MANUFACTURER}


def pattern_mask(pattern: str) -> np.ndarray:
    name = PATTERN_ALIASES.get(pattern, pattern)
    try:
        return PATTERNS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown calibration pattern {pattern!r}; expected one of {sorted(PATTERNS)}"
        ) from None


def canonical_pattern(pattern: str) -> str:
    pattern_mask(pattern)
    return PATTERN_ALIASES.get(pattern, pattern)


def coefficient_name(i: int, j: int) -> str:
    return f"c_{i}{j}"


@dataclass(frozen=True)
class PressureSample:
    timestamp: float
    p_raw: float
    t: float
    sensor_id: str = ""

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.timestamp, self.p_raw, self.t)):
            raise InvalidInputError("pressure sample fields must be finite")
        if self.p_raw <= 0:
            raise InvalidInputError(f"p_raw must be positive, got {self.p_raw}")


@dataclass(frozen=True)
class PressureStream:
    """One sensor channel as parallel arrays; the vectorized counterpart of PressureSample."""

    sensor_id: str
    timestamps: np.ndarray
    p_raw: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        arrs = [np.array(getattr(self, k), dtype=float).reshape(-1) for k in ("timestamps", "p_raw", "t")]
        if len({a.size for a in arrs}) != 1:
            raise InvalidInputError("stream columns must have equal length")
        _check_finite(*arrs)
        if np.any(np.diff(arrs[0]) < 0):
            raise InvalidInputError(f"timestamps of channel {self.sensor_id!r} must be sorted")
        for k, a in zip(("timestamps", "p_raw", "t"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    def __len__(self):
        return self.timestamps.size

    @classmethod
    def from_samples(cls, samples: Iterable[PressureSample], sensor_id: str = "") -> "PressureStream":
        rows = sorted(samples, key=lambda s: s.timestamp)
        return cls(sensor_id, [s.timestamp for s in rows], [s.p_raw for s in rows], [s.t for s in rows])

    def samples(self) -> list[PressureSample]:
        return [PressureSample(a, b, c, self.sensor_id) for a, b, c in zip(self.timestamps, self.p_raw, self.t)]

    def pairs(self, pressures=None) -> np.ndarray:
        """``(timestamp, pressure)`` rows, using ``p_raw`` unless pressures are given."""
        p = self.p_raw if pressures is None else pressures
        return np.column_stack([self.timestamps, p])


@dataclass(frozen=True)
class CalibrationModel:
    """Coefficient matrix ``coeffs[i, j]`` multiplying ``p**i * t**j``."""

    coeffs: np.ndarray
    pattern: str = "A_full"
    sigma_p2: float = 0.0
    order: int = ORDER

    def __post_init__(self):
        pattern = canonical_pattern(self.pattern)
        object.__setattr__(self, "pattern", pattern)
        if self.order != ORDER:
            raise InvalidInputError(f"only order {ORDER} models are supported")
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (ORDER + 1, ORDER + 1):
            raise InvalidInputError(f"coeffs must be {ORDER + 1}x{ORDER + 1}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("coefficients must be finite")
        if np.any(c[~PATTERNS[pattern]] != 0.0):
            raise InvalidInputError(f"coefficients outside the {pattern} pattern must be zero")
        if not (self.sigma_p2 >= 0 and math.isfinite(self.sigma_p2)):
            raise InvalidInputError("sigma_p2 must be finite and non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_terms(cls, terms: dict, pattern="A_full", sigma_p2=0.0):
        """Build a model from ``{(i, j): value}``."""
        c = np.zeros((ORDER + 1, ORDER + 1))
        for (i, j), v in terms.items():
            c[i, j] = v
        return cls(c, pattern, sigma_p2)

    @classmethod
    def identity(cls, pattern="A_p", sigma_p2=0.0):
        return cls.from_terms({(1, 0): 1.0}, pattern, sigma_p2)

    def __call__(self, p_raw, t):
        return apply_calibration(self, p_raw, t)


def manufacturer_model(coeffs, sigma_p2=0.0) -> CalibrationModel:
    """Wrap factory-supplied coefficients without refitting."""
    return CalibrationModel(np.asarray(coeffs, dtype=float), MANUFACTURER, sigma_p2)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite input")


def apply_calibration(model: CalibrationModel, p_raw, t):
    p = np.asarray(p_raw, dtype=float)
    tt = np.asarray(t, dtype=float)
    _check_finite(p, tt)
    if np.any(p <= 0):
        raise InvalidInputError("p_raw must be positive")
    p, tt = np.broadcast_arrays(p, tt)
    out = np.zeros(p.shape)
    mask = PATTERNS[model.pattern]
    # Horner in p over rows, each row a polynomial in t
    for i in range(ORDER, -1, -1):
        row = np.zeros(p.shape)
        for j in range(ORDER, -1, -1):
            row = row * tt + (model.coeffs[i, j] if mask[i, j] else 0.0)
        out = out * p + row
    return out.item() if out.ndim == 0 else out


def _shift_matrix(mean: float, scale: float) -> np.ndarray:
    """S[a, k]: coefficient of x**a in ((x - mean) / scale)**k."""
    S = np.zeros((ORDER + 1, ORDER + 1))
    for k in range(ORDER + 1):
        for a in range(k + 1):
            S[a, k] = math.comb(k, a) * (-mean) ** (k - a) / scale**k
    return S


class FitResult(NamedTuple):
    model: CalibrationModel
    residuals: np.ndarray
    rss: float


def fit_calibration_arrays(p_raw, t, p_ref, pattern: str) -> FitResult:
    """Least-squares fit of the free coefficients of ``pattern``.

    Inputs are standardized before solving; coefficients are returned in raw
    units. Raises DegenerateFitError when the standardized design matrix has
    condition number above 1e12.
    """
    pattern = canonical_pattern(pattern)
    mask = PATTERNS[pattern]
    p = np.asarray(p_raw, dtype=float).ravel()
    tt = np.asarray(t, dtype=float).ravel()
    y = np.asarray(p_ref, dtype=float).ravel()
    _check_finite(p, tt, y)
    if not (p.size == tt.size == y.size):
        raise InvalidInputError("p_raw, t and p_ref must have equal length")
    if np.any(p <= 0):
        raise InvalidInputError("p_raw must be positive")
    cells = [tuple(c) for c in np.argwhere(mask)]
    n_free = len(cells)
    if p.size < 2 * n_free:
        raise InvalidInputError(
            f"{pattern} has {n_free} free coefficients and needs at least {2 * n_free} samples,"
            f" got {p.size}"
        )

    p_mean, p_std = p.mean(), p.std()
    t_mean, t_std = tt.mean(), tt.std()
    p_scale = p_std if p_std > 0 else 1.0
    t_scale = t_std if t_std > 0 else 1.0
    u = (p - p_mean) / p_scale
    v = (tt - t_mean) / t_scale
    y_mean = y.mean()
    y_scale = y.std() or 1.0
    z = (y - y_mean) / y_scale

    X = np.column_stack([u**i * v**j for i, j in cells])
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else math.inf
    if s[0] == 0 or cond > MAX_CONDITION:
        weak = Vt[s < s[0] / MAX_CONDITION] if s[0] > 0 else Vt
        names = []
        for vec in weak:
            vec = vec / np.abs(vec).max()
            names += [coefficient_name(*cells[k]) for k in np.flatnonzero(np.abs(vec) > 0.1)]
        names = sorted(set(names))
        raise DegenerateFitError(
            f"rank-deficient design for {pattern} (condition {cond:.3g});"
            f" unobservable direction involves {', '.join(names)}",
            names,
        )
    b = Vt.T @ ((U.T @ z) / s)

    B = np.zeros((ORDER + 1, ORDER + 1))
    for (i, j), val in zip(cells, b):
        B[i, j] = val * y_scale
    B[0, 0] += y_mean
    C = _shift_matrix(p_mean, p_scale) @ B @ _shift_matrix(t_mean, t_scale).T
    C[~mask] = 0.0

    resid = X @ b * y_scale + y_mean - y
    rss = float(resid @ resid)
    dof = p.size - n_free
    model = CalibrationModel(C, pattern, rss / dof)
    return FitResult(model, resid, rss)


def fit_calibration(
    samples: Iterable[tuple[PressureSample, float]], pattern: str
) -> CalibrationModel:
    pairs = list(samples)
    p = np.array([s.p_raw for s, _ in pairs], dtype=float)
    t = np.array([s.t for s, _ in pairs], dtype=float)
    y = np.array([ref for _, ref in pairs], dtype=float)
    return fit_calibration_arrays(p, t, y, pattern).model


def calibration_residuals(model: CalibrationModel, p_raw, t, p_ref) -> np.ndarray:
    """Signed residuals ``p_cal - p_ref``."""
    return np.asarray(apply_calibration(model, p_raw, t)) - np.asarray(p_ref, dtype=float)


@dataclass(frozen=True)
class FilterConfig:
    process_variance: float
    observation_variance: float

    def __post_init__(self):
        for name in ("process_variance", "observation_variance"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be positive and finite, got {v}")

    @classmethod
    def from_model(cls, model: CalibrationModel, ratio: float = DEFAULT_RATIO) -> "FilterConfig":
        """Observation variance from the fit residual, process variance ``ratio`` times smaller."""
        return cls(model.sigma_p2 / ratio, model.sigma_p2)

    @classmethod
    def from_sigma(cls, sigma: float, ratio: float = DEFAULT_RATIO) -> "FilterConfig":
        return cls(sigma**2 / ratio, sigma**2)


def filter_pressure(stream: Sequence[float], cfg: FilterConfig) -> np.ndarray:
    """Constant-state scalar Kalman filter.

    The first output equals the first observation; its variance starts at the
    observation variance.
    """
    z = np.asarray(stream, dtype=float).ravel()
    if z.size == 0:
        raise InvalidInputError("cannot filter an empty stream")
    _check_finite(z)
    q, r = cfg.process_variance, cfg.observation_variance
    out = np.empty_like(z)
    x = z[0]
    P = r
    out[0] = x
    for k in range(1, z.size):
        P_pred = P + q
        gain = P_pred / (P_pred + r)
        x = x + gain * (z[k] - x)
        P = (1.0 - gain) * P_pred
        out[k] = x
    return out


def steady_state_gain(cfg: FilterConfig) -> float:
    q, r = cfg.process_variance, cfg.observation_variance
    P_pred = 0.5 * (q + math.sqrt(q * q + 4.0 * q * r))
    return P_pred / (P_pred + r)
