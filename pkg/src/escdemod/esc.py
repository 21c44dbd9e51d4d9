"""Affine extremum-seeking controllers and a fixed-step RK4 integrator.

Every controller is written as ``dx/dt = f0(x) + f1(x) xi`` where ``xi`` is
the vector of derivative estimates fed by a :class:`DerivativeSource`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .demod import DemodSpec
from .estimator import CostMap, averaged_estimate, pointwise_estimate
from .multiindex import DerivativeBasis, MultiIndex


class ConfigurationError(ValueError):
    """Controller cannot be built from the given estimator or gains."""


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, message: str, t: float, state: np.ndarray, trajectory: Trajectory | None = None):
        super().__init__(message)
        self.t = t
        self.state = state
        self.trajectory = trajectory


# ---------------------------------------------------------------- vech


class VechToolkit:
    """Half-vectorization with duplication ``D_n`` and elimination ``L_n``.

    ``vec`` stacks columns; ``vech`` stacks the on-and-below-diagonal part
    of each column.
    """

    def __init__(self, n: int):
        self.n = n
        self.m = n * (n + 1) // 2
        self.pairs = [(i, j) for j in range(n) for i in range(j, n)]
        D = np.zeros((n * n, self.m))
        L = np.zeros((self.m, n * n))
        for k, (i, j) in enumerate(self.pairs):
            D[i + j * n, k] = 1.0
            D[j + i * n, k] = 1.0
            L[k, i + j * n] = 1.0
        self.D = D
        self.L = L

        pi, pj = np.array([p[0] for p in self.pairs]), np.array([p[1] for p in self.pairs])
        self._i, self._j = pi[:, None], pj[:, None]
        self._k, self._l = pi[None, :], pj[None, :]
        self._offdiag = (pi != pj)[None, :]

    def congruence(self, G: np.ndarray) -> np.ndarray:
        """``L_n (G kron G) D_n``, i.e. the matrix of ``vech H -> vech(G H G)``
        for symmetric ``G``, assembled entrywise."""
        i, j, k, l = self._i, self._j, self._k, self._l
        return G[i, k] * G[j, l] + self._offdiag * G[i, l] * G[j, k]

    @staticmethod
    def vec(S: np.ndarray) -> np.ndarray:
        return np.asarray(S).reshape(-1, order="F")

    def vech(self, S: np.ndarray) -> np.ndarray:
        S = np.asarray(S)
        return np.array([S[i, j] for i, j in self.pairs])

    def unvech(self, v: np.ndarray) -> np.ndarray:
        return (self.D @ np.asarray(v)).reshape(self.n, self.n, order="F")


# ---------------------------------------------------------------- derivative sources


class DerivativeSource:
    """Supplies ``xi`` (over ``basis``) given time and parameter estimate."""

    basis: DerivativeBasis

    def __call__(self, t: float, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PointwiseSource(DerivativeSource):
    """``h(omega t, a) J(theta + a p(omega t))``: the model-free estimate."""

    def __init__(self, demod: DemodSpec, J: CostMap, omega: float = 1.0, a: float | None = None):
        self.demod = demod
        self.J = J
        self.omega = float(omega)
        self.a = demod.a if a is None else a
        self.basis = demod.basis

    def __call__(self, t, theta):
        return pointwise_estimate(self.demod, self.J, theta, self.omega * t, self.a)

    def measured_cost(self, t, theta) -> float:
        tau = self.omega * t
        return float(self.J(np.asarray(theta) + self.a * self.demod.dither(tau)))


class AveragedSource(DerivativeSource):
    """Time-averaged estimate; drives the averaged system."""

    def __init__(self, demod: DemodSpec, J: CostMap, a: float | None = None, tol: float = 1e-10):
        self.demod, self.J, self.tol = demod, J, tol
        self.a = demod.a if a is None else a
        self.basis = demod.basis

    def __call__(self, t, theta):
        return averaged_estimate(self.demod, self.J, theta, self.a, self.tol)


class ExactSource(DerivativeSource):
    """True derivatives; drives the model-based comparison system."""

    def __init__(self, J: CostMap, basis: DerivativeBasis):
        self.J, self.basis = J, basis

    def __call__(self, t, theta):
        return self.J.derivatives(self.basis, theta)


# ---------------------------------------------------------------- affine ESC


@dataclass
class AffineESC:
    name: str
    n: int
    state_dim: int
    f0: Callable[[np.ndarray], np.ndarray]
    f1: Callable[[np.ndarray], np.ndarray]
    source: DerivativeSource
    select: list[int]
    gains: dict = field(default_factory=dict)
    labels: list[str] = field(default_factory=list)

    def theta(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[: self.n]

    def xi(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.source(t, self.theta(x)))[self.select]

    def rhs(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.f0(x) + self.f1(x) @ self.xi(t, x)

    __call__ = rhs


def _require(basis: DerivativeBasis, order: int, what: str) -> None:
    if not basis.has_order(order):
        raise ConfigurationError(f"{what} needs order-{order} estimates; basis covers orders {basis.min_order}..{basis.max_order}")


def _gradient_positions(basis: DerivativeBasis) -> list[int]:
    n = basis.n
    return [basis.position(MultiIndex(tuple(int(i == k) for i in range(n)))) for k in range(n)]


def gradient_esc(k: float, source: DerivativeSource) -> AffineESC:
    """``dtheta/dt = -k g``."""
    basis = source.basis
    _require(basis, 1, "gradient ESC")
    n = basis.n
    return AffineESC(
        "gradient", n, n,
        f0=lambda x: np.zeros(n),
        f1=lambda x: -k * np.eye(n),
        source=source,
        select=_gradient_positions(basis),
        gains={"k": k},
        labels=[f"theta{i}" for i in range(n)],
    )


def heavy_ball_esc(k: float, beta: float, source: DerivativeSource) -> AffineESC:
    """``dtheta/dt = phi``, ``dphi/dt = -beta phi - k g``."""
    if not beta > 0:
        raise ConfigurationError(f"damping beta must be positive, got {beta}")
    basis = source.basis
    _require(basis, 1, "heavy-ball ESC")
    n = basis.n
    B = np.vstack([np.zeros((n, n)), -k * np.eye(n)])
    return AffineESC(
        "heavy-ball", n, 2 * n,
        f0=lambda x: np.concatenate([x[n:], -beta * x[n:]]),
        f1=lambda x: B,
        source=source,
        select=_gradient_positions(basis),
        gains={"k": k, "beta": beta},
        labels=[f"theta{i}" for i in range(n)] + [f"phi{i}" for i in range(n)],
    )


def newton_esc(
    k: float,
    omega_l: float,
    source: DerivativeSource,
    gamma0: np.ndarray | None = None,
    maximize: bool = False,
) -> tuple[AffineESC, np.ndarray]:
    """Newton ESC on the augmented state ``(theta, vech Gamma)``.

    ``dtheta/dt = -k Gamma g`` and ``dGamma/dt = omega_l (Gamma - Gamma H Gamma)``,
    the latter in half-vectorized form ``omega_l vech Gamma
    - omega_l L_n (Gamma kron Gamma) D_n vech H``.

    Returns the controller and the default initial ``vech Gamma`` (``+I`` for
    minimization, ``-I`` for maximization, unless ``gamma0`` is given).
    """
    basis = source.basis
    _require(basis, 1, "Newton ESC")
    _require(basis, 2, "Newton ESC")
    n = basis.n
    vt = VechToolkit(n)
    if gamma0 is None:
        gamma0 = -np.eye(n) if maximize else np.eye(n)
    gamma0 = np.asarray(gamma0, dtype=float)
    if not np.allclose(gamma0, gamma0.T):
        raise ConfigurationError("initial inverse-Hessian estimate must be symmetric")
    if abs(np.linalg.det(gamma0)) < 1e-12:
        raise ConfigurationError("initial inverse-Hessian estimate must be nonsingular")
    hess_pos = []
    for i, j in vt.pairs:
        e = [0] * n
        e[i] += 1
        e[j] += 1
        hess_pos.append(basis.position(MultiIndex(tuple(e))))

    def f0(x):
        return np.concatenate([np.zeros(n), omega_l * x[n:]])

    out = np.zeros((n + vt.m, n + vt.m))

    def f1(x):
        G = vt.unvech(x[n:])
        out[:n, :n] = -k * G
        out[n:, n:] = -omega_l * vt.congruence(G)
        return out.copy()

    esc = AffineESC(
        "newton", n, n + vt.m, f0, f1, source,
        select=_gradient_positions(basis) + hess_pos,
        gains={"k": k, "omega_l": omega_l},
        labels=[f"theta{i}" for i in range(n)] + [f"Gamma{i}{j}" for i, j in vt.pairs],
    )
    esc.vech = vt
    return esc, vt.vech(gamma0)


# ---------------------------------------------------------------- integration


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    labels: list[str] = field(default_factory=list)

    def to_csv(self, path, columns: Sequence[str] | None = None) -> None:
        labels = self.labels or [f"x{i}" for i in range(self.x.shape[1])]
        extra_names = list(self.extras) if columns is None else list(columns)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *labels, *extra_names])
            for i in range(len(self.t)):
                row = [self.t[i], *self.x[i], *(self.extras[c][i] for c in extra_names)]
                w.writerow([repr(float(v)) for v in row])


def rk4_step(rhs, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(t, x)
    k2 = rhs(t + dt / 2, x + dt / 2 * k1)
    k3 = rhs(t + dt / 2, x + dt / 2 * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    x0,
    horizon: float,
    dt: float,
    record: Callable[[float, np.ndarray], dict[str, float]] | None = None,
    every: int = 1,
) -> Trajectory:
    """Classical fixed-step RK4 from ``t = 0`` to ``horizon``.

    ``record(t, x)``, if given, returns named scalars logged alongside the
    state at every ``every``-th step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    steps = int(round(horizon / dt))
    x = np.array(x0, dtype=float)
    ts, xs = [0.0], [x.copy()]
    extras: dict[str, list[float]] = {}

    def log(t, x):
        if record is not None:
            for key, val in record(t, x).items():
                extras.setdefault(key, []).append(val)

    log(0.0, x)
    for i in range(steps):
        t = i * dt
        x_new = rk4_step(rhs, t, x, dt)
        t_new = (i + 1) * dt
        if not np.all(np.isfinite(x_new)):
            partial = Trajectory(np.array(ts), np.array(xs), {k: np.array(v) for k, v in extras.items()})
            raise DivergenceError(f"non-finite state at t={t_new:.6g}", t, x, partial)
        x = x_new
        if (i + 1) % every == 0 or i + 1 == steps:
            ts.append(t_new)
            xs.append(x.copy())
            log(t_new, x)
    return Trajectory(np.array(ts), np.array(xs), {k: np.array(v) for k, v in extras.items()})


def simulate_esc(esc: AffineESC, x0, horizon: float, dt: float, every: int = 1) -> Trajectory:
    """Integrate an ESC and log the estimates and the cost at ``theta_hat``."""
    J = getattr(esc.source, "J", None)
    names = [f"xi{esc.source.basis[i]}" for i in esc.select]

    def record(t, x):
        xi = esc.xi(t, x)
        row = dict(zip(names, xi.tolist()))
        if J is not None:
            row["J"] = float(J(esc.theta(x)))
        return row

    traj = integrate(esc.rhs, x0, horizon, dt, record, every)
    traj.labels = esc.labels
    return traj
