"""Dither waveforms, the extended dither, and time averaging.

All signals are vectorized: calling a signal with an array of ``N`` times
returns an ``(N, k)`` array.  Averages of periodic signals are computed over
one period with composite Simpson quadrature on panels split at the
waveform's kinks; almost-periodic signals are averaged over doubling
horizons.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.interpolate import CubicHermiteSpline

from .multiindex import DerivativeBasis, ParameterError, monomials

_RATIONAL_DENOMINATOR = 10_000
_RATIONAL_RTOL = 1e-12


class AveragingError(RuntimeError):
    """Time average did not converge; ``report`` carries the best estimate."""

    def __init__(self, message: str, report: AverageReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Periodicity:
    """Timing information needed to average a signal.

    ``period`` is ``None`` for almost-periodic signals, which are then
    averaged over horizons ``base_horizon * 2**k``.  ``breakpoints`` lists the
    kinks inside one period (periodic case only) and ``resolution`` is the
    shortest time scale present, which sets the sampling density.
    """

    period: float | None
    base_horizon: float
    resolution: float
    breakpoints: tuple[float, ...] = ()

    @property
    def is_periodic(self) -> bool:
        return self.period is not None


@dataclass(frozen=True)
class AverageReport:
    value: np.ndarray | float
    horizon: float
    error: float
    converged: bool


def _as_fraction(x: float) -> Fraction | None:
    q = Fraction(x).limit_denominator(_RATIONAL_DENOMINATOR)
    if abs(float(q) - x) <= _RATIONAL_RTOL * max(1.0, abs(x)):
        return q
    return None


def common_period(periods: Sequence[float]) -> float | None:
    """Least common multiple of periods, or None if some ratio is irrational."""
    periods = [float(p) for p in periods]
    base = min(periods)
    ratios = []
    for p in periods:
        q = _as_fraction(p / base)
        if q is None:
            return None
        ratios.append(q)
    num = reduce(math.lcm, (q.numerator for q in ratios))
    den = reduce(math.gcd, (q.denominator for q in ratios))
    return base * num / den


def period_from_rates(rates: Sequence[float]) -> float | None:
    """Common period of ``sin(r_i t)`` terms, or None if incommensurate."""
    rates = [abs(float(r)) for r in rates if r != 0]
    if not rates:
        return None
    return common_period([2 * math.pi / r for r in rates])


def combine_periodicity(*items: Periodicity) -> Periodicity:
    """Timing of a product of signals with the given periodicities."""
    resolution = min(p.resolution for p in items)
    base_horizon = max(p.base_horizon for p in items)
    if all(p.is_periodic for p in items):
        period = common_period([p.period for p in items])
        if period is not None:
            bps = set()
            for p in items:
                reps = int(round(period / p.period))
                for k in range(reps):
                    bps.update(b + k * p.period for b in p.breakpoints)
            bps = tuple(sorted(b for b in bps if 0.0 < b < period))
            return Periodicity(period, period, resolution, bps)
    return Periodicity(None, base_horizon, resolution)


# ---------------------------------------------------------------- averaging


def _simpson(values: np.ndarray, h: float) -> np.ndarray:
    return h / 3.0 * (values[0] + values[-1] + 4.0 * values[1:-1:2].sum(axis=0) + 2.0 * values[2:-1:2].sum(axis=0))


def _panel_integral(f, lo: float, hi: float, tol: float, start: int, max_level: int):
    n = start
    t = np.linspace(lo, hi, n + 1)
    values = np.asarray(f(t), dtype=float)
    prev = _simpson(values, (hi - lo) / n)
    for _ in range(max_level):
        n *= 2
        mids = lo + (hi - lo) * (np.arange(1, n, 2) / n)
        new = np.asarray(f(mids), dtype=float)
        merged = np.empty((n + 1,) + values.shape[1:])
        merged[0::2] = values
        merged[1::2] = new
        values = merged
        cur = _simpson(values, (hi - lo) / n)
        diff = float(np.max(np.abs(cur - prev))) if np.size(cur) else 0.0
        if diff < tol:
            return cur, diff / 15.0, True
        prev = cur
    return prev, diff / 15.0, False


def _bump_weights(s: np.ndarray) -> np.ndarray:
    w = np.zeros_like(s)
    inside = (s > 0) & (s < 1)
    si = s[inside]
    w[inside] = np.exp(-1.0 / (si * (1.0 - si)))
    return w


def _weighted_mean(f, horizon: float, step: float, chunk: int = 1 << 16):
    n = max(int(math.ceil(horizon / step)), 64)
    total = None
    wsum = 0.0
    for start in range(0, n + 1, chunk):
        idx = np.arange(start, min(start + chunk, n + 1))
        t = idx * (horizon / n)
        w = _bump_weights(idx / n)
        vals = np.asarray(f(t), dtype=float)
        part = np.tensordot(w, vals, axes=(0, 0))
        total = part if total is None else total + part
        wsum += float(w.sum())
    return total / wsum


def time_average(
    f: Callable[[np.ndarray], np.ndarray],
    periodicity: Periodicity,
    tol: float = 1e-10,
    *,
    max_doublings: int = 20,
    min_subdivisions: int = 16,
    max_level: int = 16,
    samples_per_resolution: int = 32,
) -> AverageReport:
    """Mean value of ``f`` over time.

    Parameters
    ----------
    f : callable
        Vectorized signal: an array of ``N`` times maps to an array whose first
        axis has length ``N`` (scalar, vector or matrix valued per time).
    periodicity : Periodicity
        Period and kinks, or base horizon for almost-periodic signals.
    tol : float
        Stopping tolerance on the change of the mean between refinements.

    Returns
    -------
    AverageReport
        ``converged`` is False if the refinement or horizon cap was reached;
        ``value`` then holds the best available estimate.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if periodicity.is_periodic:
        T = periodicity.period
        edges = [0.0, *periodicity.breakpoints, T]
        total = 0.0
        err = 0.0
        ok = True
        for lo, hi in zip(edges[:-1], edges[1:]):
            val, e, conv = _panel_integral(f, lo, hi, tol * (hi - lo), min_subdivisions, max_level)
            total = total + val
            err += e
            ok = ok and conv
        return AverageReport(total / T, T, err / T, ok)

    step = periodicity.resolution / samples_per_resolution
    horizon = periodicity.base_horizon
    prev = _weighted_mean(f, horizon, step)
    diff = math.inf
    for _ in range(max_doublings):
        horizon *= 2
        cur = _weighted_mean(f, horizon, step)
        diff = float(np.max(np.abs(cur - prev))) if np.size(cur) else 0.0
        prev = cur
        if diff < tol:
            return AverageReport(cur, horizon, diff, True)
    return AverageReport(prev, horizon, diff, False)


def require_converged(report: AverageReport, what: str) -> np.ndarray:
    if not report.converged:
        raise AveragingError(f"time average of {what} did not converge (last change {report.error:.3g})", report)
    return report.value


# ---------------------------------------------------------------- signals


class Signal:
    """A vector-valued function of time with known periodicity."""

    dim: int
    periodicity: Periodicity

    def __call__(self, t) -> np.ndarray:
        raise NotImplementedError


class DitherSpec(Signal):
    """Base dither ``p(t)`` in R^n, rescaled so that ``sup ||p(t)||_2 = 1``.

    Subclasses implement :meth:`raw`; ``scale`` is the factor applied to the
    raw waveform at construction.
    """

    kind = "dither"
    scale: float = 1.0

    def raw(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        out = self.scale * self.raw(np.atleast_1d(np.asarray(t, dtype=float)))
        return out[0] if scalar else out

    @property
    def n(self) -> int:
        return self.dim

    def _normalize(self, raw_sup: float) -> None:
        if not raw_sup > 0:
            raise ParameterError("dither is identically zero")
        self.scale = 1.0 if abs(raw_sup - 1.0) < 1e-13 else 1.0 / raw_sup

    def _numeric_sup(self, period: float, breakpoints: Sequence[float] = ()) -> float:
        """Sup of ``||raw(t)||_2`` over one period: dense scan, then local polish."""
        edges = sorted({0.0, *breakpoints, period})
        t = np.concatenate([np.linspace(lo, hi, 4001) for lo, hi in zip(edges[:-1], edges[1:])])
        norms = np.linalg.norm(self.raw(t), axis=1)
        best = float(norms.max())
        h = period / 4000
        for i in np.argsort(norms)[-8:]:
            lo, hi = max(t[i] - h, 0.0), min(t[i] + h, period)
            res = optimize.minimize_scalar(
                lambda s: -float(np.linalg.norm(self.raw(np.array([s]))[0])),
                bounds=(lo, hi),
                method="bounded",
                options={"xatol": 1e-13},
            )
            best = max(best, -float(res.fun))
        return best


class SinusoidalDither(DitherSpec):
    """``p_i(t) = d_i sin(r_i t)``; almost-periodic when the rates are incommensurate."""

    kind = "sinusoidal"

    def __init__(self, amplitudes: Sequence[float], rates: Sequence[float]):
        self.amplitudes = np.asarray(amplitudes, dtype=float)
        self.rates = np.asarray(rates, dtype=float)
        if self.amplitudes.ndim != 1 or self.amplitudes.shape != self.rates.shape:
            raise ParameterError("amplitudes and rates must be 1-D and of equal length")
        if np.any(self.rates <= 0):
            raise ParameterError("rates must be positive")
        self.dim = len(self.rates)
        period = period_from_rates(self.rates)
        resolution = 2 * math.pi / float(self.rates.max())
        if period is not None:
            self.periodicity = Periodicity(period, period, resolution)
            self._normalize(self._numeric_sup(period))
        else:
            self.periodicity = Periodicity(None, 2 * math.pi / float(self.rates.min()), resolution)
            # rationally independent rates: Kronecker density makes all
            # sines reach +-1 simultaneously in the limit
            self._normalize(float(np.linalg.norm(self.amplitudes)))

    @property
    def effective_amplitudes(self) -> np.ndarray:
        return self.scale * self.amplitudes

    def raw(self, t):
        return self.amplitudes * np.sin(np.outer(t, self.rates))


def arm_angle(t):
    """Servo arm angle: a triangle wave of period 2 sweeping [-pi/2, pi/2]."""
    t = np.asarray(t, dtype=float)
    s = np.mod(t, 2.0)
    up = -math.pi / 2 + math.pi * s
    down = math.pi / 2 - math.pi * np.mod(t - 1.0, 2.0)
    out = np.where(s < 1.0, up, down)
    return float(out) if out.ndim == 0 else out


class TriangleArmDither(DitherSpec):
    """Relative-frame sensor offset ``(cos phi(t), sin phi(t))`` for the swept arm."""

    kind = "triangle-arm"

    def __init__(self):
        self.dim = 2
        self.periodicity = Periodicity(2.0, 2.0, 2.0 / 8, (1.0,))
        self.scale = 1.0

    def raw(self, t):
        phi = arm_angle(t)
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


class TableDither(DitherSpec):
    """Periodic piecewise-cubic Hermite waveform from a breakpoint table.

    ``times`` spans exactly one period (first to last row); ``values`` and
    ``derivatives`` have shape ``(len(times), n)``.  The first and last rows
    must agree in value so the periodic extension is continuous.
    """

    kind = "table"

    def __init__(self, times, values, derivatives):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        derivatives = np.asarray(derivatives, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
            derivatives = derivatives.reshape(-1, 1)
        if len(times) < 2 or values.shape[0] != len(times) or values.shape != derivatives.shape:
            raise ParameterError("table rows/columns are inconsistent")
        if np.any(np.diff(times) <= 0):
            raise ParameterError("breakpoint times must be strictly increasing")
        if not np.allclose(values[0], values[-1], atol=1e-12, rtol=0):
            raise ParameterError("table waveform is discontinuous across the period boundary")
        self.times = times
        self.values = values
        self.derivatives = derivatives
        self.t0 = float(times[0])
        period = float(times[-1] - times[0])
        self.dim = values.shape[1]
        self._spline = CubicHermiteSpline(times, values, derivatives, axis=0)
        interior = tuple(float(b - self.t0) for b in times[1:-1])
        self.periodicity = Periodicity(period, period, float(np.min(np.diff(times))), interior)
        self._normalize(self._numeric_sup(period, interior))

    def raw(self, t):
        T = self.periodicity.period
        return self._spline(self.t0 + np.mod(np.asarray(t, dtype=float) - self.t0, T))

    @classmethod
    def from_csv(cls, path: str | Path) -> TableDither:
        times, values, derivs = read_waveform_csv(path)
        return cls(times, values, derivs)


class TrigSignal(Signal):
    """Sum-of-sinusoids vector signal, used as auxiliary demodulation input.

    Each component is a list of ``(amplitude, "sin"|"cos", rate)`` terms.
    """

    def __init__(self, components: Sequence[Sequence[tuple[float, str, float]]]):
        self.components = [[(float(amp), str(kind), float(rate)) for amp, kind, rate in terms] for terms in components]
        for terms in self.components:
            for _, kind, _ in terms:
                if kind not in ("sin", "cos"):
                    raise ParameterError(f"unknown term kind {kind!r}")
        self.dim = len(self.components)
        rates = [rate for terms in self.components for _, _, rate in terms if rate != 0]
        if not rates:
            self.periodicity = Periodicity(1.0, 1.0, 1.0)
        else:
            period = period_from_rates(rates)
            res = 2 * math.pi / max(abs(r) for r in rates)
            base = 2 * math.pi / min(abs(r) for r in rates)
            self.periodicity = Periodicity(period, period if period else base, res) if period else Periodicity(None, base, res)

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((len(t), self.dim))
        for j, terms in enumerate(self.components):
            for amp, kind, rate in terms:
                out[:, j] += amp * (np.sin(rate * t) if kind == "sin" else np.cos(rate * t))
        return out[0] if scalar else out


@dataclass(frozen=True)
class ExtendedDither(Signal):
    """Monomials ``rho_i(t) = p(t)^alpha_i`` over a derivative basis."""

    dither: DitherSpec
    basis: DerivativeBasis
    dim: int = field(init=False)

    def __post_init__(self):
        if self.basis.n != self.dither.n:
            raise ParameterError(f"basis dimension {self.basis.n} != dither dimension {self.dither.n}")
        object.__setattr__(self, "dim", len(self.basis))

    @property
    def periodicity(self) -> Periodicity:
        return self.dither.periodicity

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self.dither.periodicity.breakpoints

    def __call__(self, t) -> np.ndarray:
        return monomials(self.dither(t), self.basis)


# ---------------------------------------------------------------- statistics


def mean_rho(ext: ExtendedDither, tol: float = 1e-12) -> np.ndarray:
    rep = time_average(ext, ext.periodicity, tol)
    return np.asarray(require_converged(rep, "rho"), dtype=float)


def covariance(ext: ExtendedDither, centered: bool = True, tol: float = 1e-12) -> np.ndarray:
    """Mean of ``rho rho^T`` (``rho - mean(rho)`` when centered)."""
    mean = mean_rho(ext, tol) if centered else np.zeros(ext.dim)

    def outer(t):
        r = ext(t) - mean
        return r[:, :, None] * r[:, None, :]

    rep = time_average(outer, ext.periodicity, tol)
    return np.asarray(require_converged(rep, "rho rho^T"), dtype=float)


def cross_variance(r: Signal, ext: ExtendedDither, centered: bool = True, tol: float = 1e-12) -> np.ndarray:
    """Mean of ``r rho^T`` (``rho`` centered when requested)."""
    if r.dim != ext.dim:
        raise ParameterError(f"auxiliary signal has {r.dim} components, basis has {ext.dim}")
    mean = mean_rho(ext, tol) if centered else np.zeros(ext.dim)
    timing = combine_periodicity(r.periodicity, ext.periodicity)

    def outer(t):
        return r(t)[:, :, None] * (ext(t) - mean)[:, None, :]

    rep = time_average(outer, timing, tol)
    return np.asarray(require_converged(rep, "r rho^T"), dtype=float)


# ---------------------------------------------------------------- table I/O
#
# Waveform tables are CSV files with a header row
#     t, <name1>, d<name1>, <name2>, d<name2>, ...
# one row per breakpoint; the rows span exactly one period and the first and
# last rows carry the same values.  Lines starting with '#' are comments.


def read_waveform_csv(path: str | Path):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [row for row in csv.reader(line for line in fh if not line.lstrip().startswith("#")) if row]
    header = [h.strip() for h in rows[0]]
    if header[0] != "t" or (len(header) - 1) % 2:
        raise ParameterError(f"{path}: header must be 't' followed by value/derivative column pairs")
    try:
        data = np.array([[float(x) for x in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ParameterError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ParameterError(f"{path}: ragged rows")
    return data[:, 0], data[:, 1::2], data[:, 2::2]


def write_waveform_csv(path: str | Path, times, values, derivatives, names: Sequence[str] | None = None) -> None:
    values = np.asarray(values, dtype=float)
    derivatives = np.asarray(derivatives, dtype=float)
    k = values.shape[1]
    names = list(names) if names else [f"c{j}" for j in range(k)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [x for name in names for x in (name, "d" + name)])
        for i, t in enumerate(times):
            w.writerow([repr(float(t))] + [repr(float(x)) for j in range(k) for x in (values[i, j], derivatives[i, j])])
