"""Derivative estimation from a single perturbed cost measurement."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .demod import DemodSpec
from .multiindex import DerivativeBasis, MultiIndex, ParameterError, enumerate_basis
from .signals import combine_periodicity, require_converged, time_average

class CapabilityError(RuntimeError):
    """A cost map lacks a requested capability (e.g. analytic derivatives)."""


@dataclass(frozen=True)
class CostMap:
    """Scalar cost ``J: R^n -> R``.

    ``func`` is vectorized over leading axes: an ``(..., n)`` array maps to
    ``(...)``.  ``derivative(alpha, theta)`` returns ``D^alpha J(theta)`` when
    analytic derivatives are known.  ``smoothness`` is the claimed ``C^k``
    class (``None`` for smooth).
    """

    n: int
    func: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[MultiIndex, np.ndarray], float] | None = None
    smoothness: int | None = None
    name: str = "J"

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n:
            raise ParameterError(f"{self.name}: expected {self.n} coordinates, got {theta.shape[-1]}")
        return self.func(theta)

    @property
    def has_derivatives(self) -> bool:
        return self.derivative is not None

    def D(self, alpha: MultiIndex | Sequence[int], theta) -> float:
        if self.derivative is None:
            raise CapabilityError(f"{self.name} has no analytic derivatives")
        alpha = alpha if isinstance(alpha, MultiIndex) else MultiIndex(tuple(alpha))
        return float(self.derivative(alpha, np.asarray(theta, dtype=float)))

    def derivatives(self, basis: DerivativeBasis, theta) -> np.ndarray:
        """True derivative tuple over the basis: analytic if available, else
        central finite differences."""
        theta = np.asarray(theta, dtype=float)
        if self.derivative is not None:
            return np.array([self.D(alpha, theta) for alpha in basis])
        return np.array([finite_difference(self, alpha, theta) for alpha in basis])


def finite_difference(J: CostMap, alpha: MultiIndex, theta: np.ndarray, step: float | None = None) -> float:
    """Tensor-product central difference for ``D^alpha J(theta)``.

    The default step ``eps^(1/(|alpha|+2))`` balances the O(h^2) truncation
    error against the O(eps/h^|alpha|) rounding error.
    """
    theta = np.asarray(theta, dtype=float)
    if step is None:
        step = np.finfo(float).eps ** (1.0 / (alpha.order + 2)) * max(1.0, float(np.max(np.abs(theta))))
    h = step
    axes = []
    for e in alpha:
        offsets = np.array([(e / 2.0 - j) * h for j in range(e + 1)])
        weights = np.array([(-1) ** j * math.comb(e, j) for j in range(e + 1)], dtype=float) / h**e
        axes.append((offsets, weights))
    grids = np.meshgrid(*[o for o, _ in axes], indexing="ij")
    wgrid = np.ones_like(grids[0])
    for k, (_, w) in enumerate(axes):
        shape = [1] * len(axes)
        shape[k] = len(w)
        wgrid = wgrid * w.reshape(shape)
    pts = theta + np.stack(grids, axis=-1)
    return float(np.sum(wgrid * J(pts)))


# ---------------------------------------------------------------- built-in maps


def _falling(e: int, k: int) -> int:
    return math.perm(e, k) if k <= e else 0


@dataclass(frozen=True)
class PolynomialMap:
    """``sum_alpha c_alpha (theta - center)^alpha`` with exact derivatives."""

    terms: Mapping[tuple[int, ...], float]
    center: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.center)

    @cached_property
    def _arrays(self):
        exps = np.array(list(self.terms.keys()), dtype=int)
        coefs = np.array(list(self.terms.values()), dtype=float)
        return np.asarray(self.center, dtype=float), exps, coefs

    def value(self, theta: np.ndarray) -> np.ndarray:
        center, exps, coefs = self._arrays
        d = np.asarray(theta, dtype=float) - center
        return np.prod(d[..., None, :] ** exps, axis=-1) @ coefs

    def increment(self, delta) -> np.ndarray:
        """Evaluate at ``center + delta``."""
        return self.value(np.asarray(self.center) + np.asarray(delta, dtype=float))

    def derivative(self, beta: MultiIndex, theta: np.ndarray) -> float:
        d = np.asarray(theta, dtype=float) - np.asarray(self.center)
        total = 0.0
        for alpha, c in self.terms.items():
            coef = c * math.prod(_falling(a, b) for a, b in zip(alpha, beta))
            if coef:
                total += coef * math.prod(x ** (a - b) for x, a, b in zip(d.tolist(), alpha, beta))
        return total

    def as_cost_map(self, name: str = "polynomial") -> CostMap:
        return CostMap(self.n, self.value, self.derivative, None, name)


def polynomial_map(terms: Mapping[tuple[int, ...], float], center=None, name: str = "polynomial") -> CostMap:
    n = len(next(iter(terms)))
    center = tuple(float(c) for c in center) if center is not None else (0.0,) * n
    return PolynomialMap(dict(terms), center).as_cost_map(name)


def quadratic_map(H, minimizer, offset: float = 0.0) -> CostMap:
    """``offset + (theta - minimizer)^T H (theta - minimizer) / 2``."""
    H = np.asarray(H, dtype=float)
    n = len(H)
    if H.shape != (n, n) or not np.allclose(H, H.T):
        raise ParameterError("H must be a symmetric square matrix")
    terms = {(0,) * n: float(offset)}
    for i in range(n):
        for j in range(i, n):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            terms[tuple(e)] = H[i, j] / 2.0 if i == j else H[i, j]
    return polynomial_map(terms, minimizer, "quadratic")


def exp_sum_map(n: int = 2) -> CostMap:
    """``exp(theta_1 + ... + theta_n)``; every derivative equals the value."""
    def f(theta):
        return np.exp(np.sum(theta, axis=-1))

    return CostMap(n, f, lambda alpha, theta: float(np.exp(np.sum(theta))), None, "exp")


def remark2_map() -> CostMap:
    """``(4/15)|theta|^(5/2)``: C^2 with Hessian ``sqrt|theta|``, so Hessian
    estimates converge only like ``sqrt(a)``."""
    def f(theta):
        return 4.0 / 15.0 * np.abs(theta[..., 0]) ** 2.5

    def d(alpha, theta):
        x = float(theta[0])
        k = alpha.order
        s = math.copysign(1.0, x) if x != 0 else 0.0
        ax = abs(x)
        if k == 0:
            return 4.0 / 15.0 * ax**2.5
        if k == 1:
            return 2.0 / 3.0 * s * ax**1.5
        if k == 2:
            return math.sqrt(ax)
        if k == 3:
            if x == 0:
                raise CapabilityError("third derivative of |theta|^(5/2) is unbounded at 0")
            return s / (2.0 * math.sqrt(ax))
        raise CapabilityError("remark2 map provides derivatives up to order 3")

    return CostMap(1, f, d, 2, "remark2")


def quartic_map() -> CostMap:
    """``theta^4 / 12`` (Hessian ``theta^2``), a smooth control for the rate study."""
    return polynomial_map({(4,): 1.0 / 12.0}, name="quartic")


def linear_map(weights=(3.0, 5.0)) -> CostMap:
    n = len(weights)
    terms = {}
    for i, w in enumerate(weights):
        e = [0] * n
        e[i] = 1
        terms[tuple(e)] = float(w)
    return polynomial_map(terms, name="linear")


BUILTIN_MAPS: dict[str, Callable[[], CostMap]] = {
    "remark2": remark2_map,
    "quartic": quartic_map,
    "exp": exp_sum_map,
    "linear": linear_map,
    "quadratic": lambda: quadratic_map([[2.0, 0.0], [0.0, 8.0]], [1.0, -0.5], 1.0),
}


def get_map(name: str) -> CostMap:
    try:
        return BUILTIN_MAPS[name]()
    except KeyError:
        raise KeyError(f"unknown map {name!r}; available: {', '.join(sorted(BUILTIN_MAPS))}") from None


# ---------------------------------------------------------------- estimation


def pointwise_estimate(demod: DemodSpec, J: CostMap, theta_hat, t, a: float | None = None) -> np.ndarray:
    """``h(t, a) J(theta_hat + a p(t))`` for scalar or array ``t``."""
    a = demod.a if a is None else a
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    theta = np.asarray(theta_hat, dtype=float) + a * demod.dither(t)
    out = demod.h(t, a) * np.asarray(J(theta))[:, None]
    return out[0] if scalar else out


def averaged_estimate(demod: DemodSpec, J: CostMap, theta_hat, a: float | None = None, tol: float = 1e-12) -> np.ndarray:
    """Time average of the pointwise estimate."""
    timing = combine_periodicity(demod.periodicity, demod.dither.periodicity)
    rep = time_average(lambda t: pointwise_estimate(demod, J, theta_hat, t, a), timing, tol)
    return np.asarray(require_converged(rep, "h J"), dtype=float)


def taylor_polynomial(J: CostMap, theta_hat, m: int) -> PolynomialMap:
    """Order-``m`` Taylor polynomial of ``J`` about ``theta_hat``."""
    if not J.has_derivatives:
        raise CapabilityError(f"{J.name} has no analytic derivatives; cannot build its Taylor polynomial")
    theta_hat = np.asarray(theta_hat, dtype=float)
    terms = {alpha.entries: J.D(alpha, theta_hat) / alpha.factorial for alpha in enumerate_basis(J.n, 0, m)}
    return PolynomialMap(terms, tuple(theta_hat.tolist()))


@dataclass
class EstimateSweep:
    basis: DerivativeBasis
    theta_hat: np.ndarray
    amplitudes: np.ndarray
    estimates: np.ndarray
    truth: np.ndarray
    components: list[int]
    tol: float
    slope: float | None = field(default=None)
    exact: bool = False

    @property
    def errors(self) -> np.ndarray:
        diff = (self.estimates - self.truth)[:, self.components]
        return np.linalg.norm(diff, axis=1)

    def fit_slope(self) -> None:
        err = self.errors
        keep = err >= 100 * self.tol
        if keep.sum() < 2:
            self.slope, self.exact = None, True
            return
        x, y = np.log(self.amplitudes[keep]), np.log(err[keep])
        self.slope = float(np.polyfit(x, y, 1)[0])
        self.exact = False

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "component", "estimate", "truth", "abs_error"])
            for k, a in enumerate(self.amplitudes):
                for i in self.components:
                    est, tru = self.estimates[k, i], self.truth[k, i]
                    w.writerow([repr(float(a)), self.basis[i], repr(float(est)), repr(float(tru)), repr(abs(float(est - tru)))])


def convergence_sweep(
    demod: DemodSpec,
    J: CostMap,
    theta_hat,
    amplitudes: Sequence[float],
    tol: float = 1e-12,
    components: Sequence[int] | None = None,
) -> EstimateSweep:
    """Averaged-estimate error against truth over decreasing amplitudes,
    with a least-squares log-log slope."""
    amps = np.asarray(amplitudes, dtype=float)
    if np.any(np.diff(amps) >= 0):
        raise ParameterError("amplitudes must be strictly decreasing")
    if np.any((amps <= 0) | (amps >= 1)):
        raise ParameterError("amplitudes must lie in (0, 1)")
    theta_hat = np.asarray(theta_hat, dtype=float)
    truth = J.derivatives(demod.basis, theta_hat)
    est = np.array([averaged_estimate(demod, J, theta_hat, a, tol) for a in amps])
    comps = list(range(len(demod.basis))) if components is None else list(components)
    sweep = EstimateSweep(demod.basis, theta_hat, amps, est, np.tile(truth, (len(amps), 1)), comps, tol)
    sweep.fit_slope()
    return sweep
