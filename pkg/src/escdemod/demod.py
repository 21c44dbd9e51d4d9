"""Existence test and synthesis of demodulation signals.

A demodulation vector ``h(t, a)`` turns a single cost measurement
``J(theta_hat + a p(t))`` into derivative estimates: averaged over time,
``h(t, a) J(...)`` must reproduce ``D^alpha J(theta_hat)`` exactly whenever
``J`` is a polynomial in the basis span.  Such an ``h`` exists iff the
extended dither has an invertible covariance matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from fractions import Fraction
from typing import Callable

import numpy as np

from .multiindex import DerivativeBasis, ParameterError, enumerate_basis
from .signals import (
    DitherSpec,
    ExtendedDither,
    Periodicity,
    Signal,
    SinusoidalDither,
    combine_periodicity,
    covariance,
    cross_variance,
    mean_rho,
    require_converged,
    time_average,
    write_waveform_csv,
)

RANK_TOL = 1e-8
VARIANTS = ("covariance", "zero-mean", "paper-verbatim", "crossvariance", "closed-form-sinusoidal")


class ExistenceError(RuntimeError):
    """No demodulation signal exists for this configuration."""

    def __init__(self, message: str, verdict: Verdict | None = None):
        super().__init__(message)
        self.verdict = verdict


@dataclass(frozen=True)
class AmplitudeMatrix:
    """Diagonal ``A`` with entries ``a^|alpha_i| / alpha_i!``."""

    basis: DerivativeBasis
    a: float

    def __post_init__(self):
        if not 0.0 < self.a < 1.0:
            raise ParameterError(f"dither amplitude must lie in (0, 1), got {self.a}")

    @property
    def diagonal(self) -> np.ndarray:
        return self.a ** self.basis.orders / self.basis.factorials

    @cached_property
    def inverse_diagonal(self) -> np.ndarray:
        return self.basis.factorials / self.a ** self.basis.orders

    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)

    def with_amplitude(self, a: float) -> AmplitudeMatrix:
        return AmplitudeMatrix(self.basis, a)


@dataclass(frozen=True)
class Verdict:
    estimable: bool
    rank: int
    size: int
    singular_values: np.ndarray
    null_basis: np.ndarray
    matrix: np.ndarray

    def __str__(self) -> str:
        if self.estimable:
            return f"estimable, rank {self.rank}/{self.size}"
        return f"singular, rank {self.rank}/{self.size}"


def _verdict(M: np.ndarray, rank_tol: float, symmetric: bool) -> Verdict:
    if symmetric:
        w, V = np.linalg.eigh(M)
        order = np.argsort(np.abs(w))[::-1]
        sv = np.abs(w)[order]
        vecs = V[:, order].T
    else:
        _, sv, Vt = np.linalg.svd(M)
        vecs = Vt
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > rank_tol * smax)) if smax > 0 else 0
    null = vecs[rank:][::-1][:3]
    # sign convention: largest-magnitude entry positive, for reproducible output
    for v in null:
        if v[np.argmax(np.abs(v))] < 0:
            v *= -1
    return Verdict(rank == len(M), rank, len(M), sv, null, M)


def check_existence(ext: ExtendedDither, centered: bool = True, tol: float = 1e-12, rank_tol: float = RANK_TOL) -> Verdict:
    """Decide whether ``rho`` (or ``rho - mean(rho)``) has linearly independent
    components, from the relative size of the smallest covariance eigenvalue."""
    Q = covariance(ext, centered=centered, tol=tol)
    return _verdict(Q, rank_tol, symmetric=True)


@dataclass(frozen=True)
class DemodSpec:
    """Synthesized demodulation vector ``h(t, a) = A^-1 C (s(t) - s0)``.

    ``s`` is the signal being demodulated against (``rho``, or an auxiliary
    ``r``, or a fixed sinusoid vector), ``C`` the stored inverse of the
    averaging matrix and ``s0`` the subtracted mean (zero unless centered).
    """

    basis: DerivativeBasis
    variant: str
    amplitude: AmplitudeMatrix
    dither: DitherSpec
    signal: Signal | Callable
    coefficients: np.ndarray
    offset: np.ndarray
    matrix: np.ndarray | None = None
    verdict: Verdict | None = None
    rho_mean: np.ndarray | None = None
    periodicity: Periodicity = field(default=None)

    @property
    def a(self) -> float:
        return self.amplitude.a

    def h(self, t, a: float | None = None) -> np.ndarray:
        """Evaluate ``h`` at time(s) ``t`` (dither time, i.e. already dilated)."""
        scalar = np.ndim(t) == 0
        s = np.atleast_2d(self.signal(np.atleast_1d(np.asarray(t, dtype=float))))
        inv = self.amplitude.inverse_diagonal if a is None else self.amplitude.with_amplitude(a).inverse_diagonal
        out = (s - self.offset) @ self.coefficients.T * inv
        return out[0] if scalar else out

    __call__ = h

    def with_amplitude(self, a: float) -> DemodSpec:
        return DemodSpec(
            self.basis, self.variant, self.amplitude.with_amplitude(a), self.dither, self.signal,
            self.coefficients, self.offset, self.matrix, self.verdict, self.rho_mean, self.periodicity,
        )

    def defining_residual(self, centered: bool | None = None, tol: float = 1e-12) -> np.ndarray:
        """``mean(h rho_hat^T) - A^-1``; zero for a valid demodulator.

        ``rho_hat`` is ``rho - mean(rho)`` for the centered variants and ``rho``
        otherwise.
        """
        if centered is None:
            centered = self.variant != "covariance"
        ext = ExtendedDither(self.dither, self.basis)
        mean = mean_rho(ext, tol) if centered else np.zeros(len(self.basis))
        timing = combine_periodicity(self.periodicity, ext.periodicity)

        def outer(t):
            return self.h(t)[:, :, None] * (ext(t) - mean)[:, None, :]

        got = require_converged(time_average(outer, timing, tol), "h rho^T")
        return got - np.diag(self.amplitude.inverse_diagonal)

    def export_table(self, path, samples_per_panel: int = 64, names=None) -> None:
        """Write ``h`` over one period as a waveform table (values + slopes)."""
        T = self.periodicity.period
        if T is None:
            raise ParameterError("only periodic demodulators can be exported as a table")
        edges = [0.0, *self.periodicity.breakpoints, T]
        times, vals, ders = [], [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            t = np.linspace(lo, hi, samples_per_panel + 1)
            eps = (hi - lo) * 1e-6
            # one-sided at the panel edges so kinks are not smeared
            tp = np.clip(t + eps, lo, hi)
            tm = np.clip(t - eps, lo, hi)
            d = (self.h(tp) - self.h(tm)) / (tp - tm)[:, None]
            start = 0 if not times else 1
            if start and not np.allclose(vals[-1][-1], self.h(t[:1])[0]):
                raise ParameterError("demodulator is discontinuous at a breakpoint")
            times.append(t[start:])
            vals.append(self.h(t)[start:])
            ders.append(d[start:])
        names = names or [f"h{alpha}" for alpha in self.basis.labels()]
        write_waveform_csv(path, np.concatenate(times), np.vstack(vals), np.vstack(ders), names)


def _invert_symmetric(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(Q)
    return (V / w) @ V.T


def synthesize_covariance_h(
    ext: ExtendedDither,
    A: AmplitudeMatrix | float,
    centered: bool = True,
    tol: float = 1e-12,
    *,
    verbatim: bool = False,
    rank_tol: float = RANK_TOL,
) -> DemodSpec:
    """``h = A^-1 Q^-1 rho~`` (centered) or ``A^-1 Q^-1 rho`` (uncentered).

    With ``verbatim=True`` the covariance is centered but ``rho`` is used
    without subtracting its mean, which reproduces the literal printed
    gradient demodulator for the servo arm (non-zero mean first component).
    """
    if not isinstance(A, AmplitudeMatrix):
        A = AmplitudeMatrix(ext.basis, float(A))
    if A.basis != ext.basis:
        raise ParameterError("amplitude matrix and extended dither use different bases")
    if verbatim:
        centered = True
    mean = mean_rho(ext, tol)
    Q = covariance(ext, centered=centered, tol=tol)
    verdict = _verdict(Q, rank_tol, symmetric=True)
    if not verdict.estimable:
        raise ExistenceError(f"covariance of the extended dither is {verdict}", verdict)
    offset = mean if (centered and not verbatim) else np.zeros(ext.dim)
    variant = "paper-verbatim" if verbatim else ("zero-mean" if centered else "covariance")
    return DemodSpec(
        basis=ext.basis,
        variant=variant,
        amplitude=A,
        dither=ext.dither,
        signal=ext,
        coefficients=_invert_symmetric(Q),
        offset=offset,
        matrix=Q,
        verdict=verdict,
        rho_mean=mean,
        periodicity=ext.periodicity,
    )


def synthesize_crossvariance_h(
    r: Signal,
    ext: ExtendedDither,
    A: AmplitudeMatrix | float,
    centered: bool = True,
    tol: float = 1e-12,
    *,
    rank_tol: float = RANK_TOL,
) -> DemodSpec:
    """``h' = A^-1 R^-1 r`` with ``R = mean(r rho~^T)``."""
    if not isinstance(A, AmplitudeMatrix):
        A = AmplitudeMatrix(ext.basis, float(A))
    R = cross_variance(r, ext, centered=centered, tol=tol)
    verdict = _verdict(R, rank_tol, symmetric=False)
    if not verdict.estimable:
        raise ExistenceError(
            f"auxiliary signal r is unsuitable for this rho: cross-variance is {verdict}", verdict
        )
    return DemodSpec(
        basis=ext.basis,
        variant="crossvariance",
        amplitude=A,
        dither=ext.dither,
        signal=r,
        coefficients=np.linalg.solve(R, np.eye(len(R))),
        offset=np.zeros(r.dim),
        matrix=R,
        verdict=verdict,
        rho_mean=mean_rho(ext, tol),
        periodicity=combine_periodicity(r.periodicity, ext.periodicity),
    )


def synthesize(ext: ExtendedDither, a: float, variant: str | None = None, r: Signal | None = None, tol: float = 1e-12) -> DemodSpec:
    """Dispatch on the variant name.  The default is zero-mean when the basis
    omits order 0 and plain covariance otherwise."""
    if variant is None:
        variant = "zero-mean" if ext.basis.min_order > 0 else "covariance"
    if variant == "covariance":
        return synthesize_covariance_h(ext, a, centered=False, tol=tol)
    if variant == "zero-mean":
        if ext.basis.min_order == 0:
            raise ParameterError("zero-mean demodulation cannot estimate the order-0 term")
        return synthesize_covariance_h(ext, a, centered=True, tol=tol)
    if variant == "paper-verbatim":
        return synthesize_covariance_h(ext, a, centered=True, tol=tol, verbatim=True)
    if variant == "crossvariance":
        if r is None:
            raise ParameterError("crossvariance variant needs an auxiliary signal r")
        return synthesize_crossvariance_h(r, ext, a, centered=ext.basis.min_order > 0, tol=tol)
    if variant == "closed-form-sinusoidal":
        return sinusoidal_rules_h(ext.dither, ext.basis, a)
    raise ParameterError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


# ---------------------------------------------------------------- sinusoidal closed forms


class _RuleSignal:
    """Vector of products ``c_i s_j(t) s_k(t) - o_i`` with ``s = (1, sin(r t))``."""

    def __init__(self, d, rates, basis):
        self.rates = np.asarray(rates, dtype=float)
        d = np.asarray(d, dtype=float)
        self.dim = len(basis)
        left, right, coef, off = [], [], [], []
        for alpha in basis:
            nz = [k for k, e in enumerate(alpha) if e]
            if alpha.order == 1:
                (k,) = nz
                left.append(0), right.append(k + 1), coef.append(2.0 / d[k]), off.append(0.0)
            elif len(nz) == 1:
                (k,) = nz
                c = 8.0 / d[k] ** 2
                left.append(k + 1), right.append(k + 1), coef.append(c), off.append(c / 2)
            else:
                j, k = nz
                left.append(j + 1), right.append(k + 1), coef.append(4.0 / (d[j] * d[k])), off.append(0.0)
        self.left, self.right = np.array(left), np.array(right)
        self.coef, self.off = np.array(coef), np.array(off)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.ones((len(t), len(self.rates) + 1))
        s[:, 1:] = np.sin(np.outer(t, self.rates))
        return self.coef * s[:, self.left] * s[:, self.right] - self.off


def sinusoidal_rules_h(dither: SinusoidalDither, basis: DerivativeBasis, a: float) -> DemodSpec:
    """Classical sinusoidal demodulators for first and second derivatives.

    With ``p_k = d_k sin(r_k t)``:  ``2/(a d_k) sin(r_k t)`` for a gradient
    entry, ``16/(a^2 d_k^2)(sin^2(r_k t) - 1/2)`` for a pure second
    derivative and ``4/(a^2 d_j d_k) sin(r_j t) sin(r_k t)`` for a mixed one.
    They are valid only when the rates satisfy the usual separation rules.
    """
    if not isinstance(dither, SinusoidalDither):
        raise ParameterError("sinusoidal rules need a sinusoidal dither")
    if basis.min_order < 1 or basis.max_order > 2:
        raise ParameterError("sinusoidal rules cover derivative orders 1 and 2 only")
    A = AmplitudeMatrix(basis, a)
    sig = _RuleSignal(dither.effective_amplitudes, dither.rates, basis)
    return DemodSpec(
        basis=basis,
        variant="closed-form-sinusoidal",
        amplitude=A,
        dither=dither,
        signal=sig,
        coefficients=np.eye(len(basis)),
        offset=np.zeros(len(basis)),
        periodicity=dither.periodicity,
    )


def closed_form_sinusoidal_h(m: int, a: float) -> Callable[[np.ndarray], np.ndarray]:
    """Top-order demodulator for ``p = sin(tau)`` and basis orders ``0..m``:
    ``(2^m m!/a^m) (-1)^((m-1)/2) sin(m tau)`` for odd ``m`` and
    ``(2^m m!/a^m) (-1)^(m/2) cos(m tau)`` for even ``m``."""
    if m < 0:
        raise ParameterError("derivative order must be >= 0")
    if not 0.0 < a < 1.0:
        raise ParameterError(f"dither amplitude must lie in (0, 1), got {a}")
    gain = 2**m * math.factorial(m) / a**m
    if m % 2:
        sign = (-1) ** ((m - 1) // 2)
        return lambda tau: gain * sign * np.sin(m * np.asarray(tau, dtype=float))
    sign = (-1) ** (m // 2)
    return lambda tau: gain * sign * np.cos(m * np.asarray(tau, dtype=float))


def sine_power_coefficients(m: int) -> list[list[Fraction]]:
    """Exact ``C`` with ``sin^i = sum_j C[i][j] rho_perp_j`` for ``i, j <= m``,
    where ``rho_perp = (1, sin t, cos 2t, sin 3t, ...)``."""
    C = [[Fraction(0)] * (m + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        if i == 0:
            C[0][0] = Fraction(1)
        elif i % 2 == 0:
            pre = Fraction((-1) ** (i // 2), 2**i)
            for k in range(i // 2):
                C[i][i - 2 * k] += pre * 2 * math.comb(i, k) * (-1) ** k
            C[i][0] += pre * math.comb(i, i // 2) * (-1) ** (i // 2)
        else:
            pre = Fraction((-1) ** ((i - 1) // 2), 2 ** (i - 1))
            for k in range((i - 1) // 2 + 1):
                C[i][i - 2 * k] += pre * math.comb(i, k) * (-1) ** k
    return C


def appendix_matrices(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower triangular ``G`` with ``rho_perp = G rho`` and the diagonal
    ``Q_perp = diag(1, 1/2, ..., 1/2)`` for ``p = sin t`` and orders ``0..m``."""
    C = sine_power_coefficients(m)
    # forward substitution on the exact lower-triangular C gives G = C^-1
    G = [[Fraction(0)] * (m + 1) for _ in range(m + 1)]
    for col in range(m + 1):
        for i in range(m + 1):
            rhs = Fraction(int(i == col)) - sum((C[i][j] * G[j][col] for j in range(i)), Fraction(0))
            G[i][col] = rhs / C[i][i]
    Qp = np.diag([1.0] + [0.5] * m)
    return np.array([[float(x) for x in row] for row in G]), Qp


@dataclass(frozen=True)
class AppendixReport:
    rows: list[dict]
    g_residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(r["sup_gap"] < self.tol for r in self.rows) and self.g_residual < max(self.tol, 1e-8)

    @property
    def worst(self) -> float:
        return max(r["sup_gap"] for r in self.rows)


def verify_appendix_equivalence(m_max: int, a: float = 0.1, tol: float = 1e-6, samples: int = 4096) -> AppendixReport:
    """Compare numerically synthesized top-order sinusoidal demodulators with
    the closed form for every order ``0..m_max`` and check
    ``Q^-1 = G^T Q_perp^-1 G`` for the full basis."""
    if not 0 <= m_max <= 8:
        raise ParameterError("m_max must lie in [0, 8]")
    dither = SinusoidalDither([1.0], [1.0])
    tau = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
    rows = []
    for m in range(m_max + 1):
        ext = ExtendedDither(dither, enumerate_basis(1, 0, m))
        spec = synthesize_covariance_h(ext, a, centered=False)
        gap = np.abs(spec.h(tau)[:, -1] - closed_form_sinusoidal_h(m, a)(tau))
        k = int(np.argmax(gap))
        rows.append({"m": m, "sup_gap": float(gap[k]), "worst_t": float(tau[k]), "scale": 2**m * math.factorial(m) / a**m})
    Q = covariance(ExtendedDither(dither, enumerate_basis(1, 0, m_max)), centered=False)
    G, Qp = appendix_matrices(m_max)
    residual = float(np.max(np.abs(np.linalg.inv(Q) - G.T @ np.linalg.inv(Qp) @ G)))
    return AppendixReport(rows, residual, tol)
