"""Unicycle source seeker with a servo-swept sensor arm.

The vehicle center ``r_c`` moves with forward speed ``v_c`` along heading
``theta`` and turns at ``omega_c``.  A sensor sits at the end of an arm of
length ``a`` whose angle ``phi`` sweeps a triangle wave; the measured cost at
the sensor is demodulated into a relative-frame gradient estimate that sets
``(v_c, omega_c)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import yaml

from .demod import DemodSpec, synthesize
from .esc import DivergenceError, rk4_step
from .multiindex import ParameterError, enumerate_basis
from .signals import ExtendedDither, TriangleArmDither, TrigSignal, arm_angle

P_REF = 20e-6
# source strength giving 80 dB at 1 m: 20 log10(S / 20e-6) = 80
ACOUSTIC_S = 0.2

# resistance fit weights w1..w6
PHOTORESISTOR_WEIGHTS = (
    8.28082113e3,
    7.90425287,
    4.42130406e2,
    5.36416164e-13,
    1.68542637e-16,
    2.18515692e-18,
)

DEMOD_CHOICES = ("hQ-verbatim", "hQ-centered", "hR")

TRAJECTORY_COLUMNS = ["t", "x_c", "y_c", "theta", "phi", "x_s", "y_s", "J", "v_c", "omega_c", "dist_to_source"]


class ConfigError(ValueError):
    """Scenario file is malformed or violates a parameter constraint."""


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class VehicleState:
    x_c: float
    y_c: float
    theta: float

    @classmethod
    def from_array(cls, x) -> VehicleState:
        return cls(float(x[0]), float(x[1]), float(x[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_c, self.y_c, self.theta])

    @property
    def r_c(self) -> np.ndarray:
        return np.array([self.x_c, self.y_c])


class RotatingArmDither(TriangleArmDither):
    """Arm of length ``a`` swept by the triangle-wave angle; ``p = (cos phi, sin phi)``."""

    def __init__(self, a: float):
        super().__init__()
        if not 0 < a < 1:
            raise ParameterError(f"arm length must lie in (0, 1), got {a}")
        self.a = float(a)

    @staticmethod
    def angle(t):
        return arm_angle(t)


def sensor_position(state: VehicleState, t: float, a: float, omega: float) -> np.ndarray:
    """Global sensor position ``r_c + a Rot(theta) p(omega t)``."""
    ang = state.theta + arm_angle(omega * t)
    return np.array([state.x_c + a * math.cos(ang), state.y_c + a * math.sin(ang)])


def wrap_degrees(x):
    """Wrap to (-180, 180]."""
    return 180.0 - np.mod(180.0 - np.asarray(x, dtype=float), 360.0)


def sensor_orientation_angle(state: VehicleState, t: float, omega: float, source, a: float = 0.154) -> float:
    """Signed angle (deg) from the arm direction to the bearing of the source,
    counter-clockwise positive, so a source clockwise of the arm gives a
    negative angle."""
    rs = sensor_position(state, t, a, omega)
    d = np.asarray(source, dtype=float) - rs
    if not np.any(d):
        raise ParameterError("sensor coincides with the source; bearing undefined")
    arm = state.theta + arm_angle(omega * t)
    return float(wrap_degrees(math.degrees(math.atan2(d[1], d[0]) - arm)))


# ---------------------------------------------------------------- cost fields


@dataclass(frozen=True)
class CostField:
    """Scalar field measured by the sensor.

    ``kind`` is ``"acoustic"`` (sound pressure level, dB), ``"photoresistor"``
    (orientation-sensitive quadratic resistance fit) or ``"user"`` (``func``
    of the sensor position only).
    """

    kind: str
    source: tuple[float, float]
    S: float = ACOUSTIC_S
    p_ref: float = P_REF
    r0: float = 1e-3
    weights: tuple[float, ...] = PHOTORESISTOR_WEIGHTS
    func: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("acoustic", "photoresistor", "user"):
            raise ParameterError(f"unknown field kind {self.kind!r}")
        if self.kind == "acoustic" and not self.r0 > 0:
            raise ParameterError("r0 must be positive")
        if self.kind == "photoresistor" and len(self.weights) != 6:
            raise ParameterError("photoresistor field needs six weights")
        if self.kind == "user" and self.func is None:
            raise ParameterError("user field needs func")

    @property
    def orientation_sensitive(self) -> bool:
        return self.kind == "photoresistor"

    def distance(self, rs) -> np.ndarray:
        rs = np.asarray(rs, dtype=float)
        return np.hypot(rs[..., 0] - self.source[0], rs[..., 1] - self.source[1])

    def __call__(self, rs, beta=None):
        if self.kind == "acoustic":
            return acoustic_J(rs, self)
        if self.kind == "photoresistor":
            return photoresistor_J(rs, 0.0 if beta is None else beta, self)
        return self.func(np.asarray(rs, dtype=float))


def acoustic_J(rs, fld: CostField):
    d = np.maximum(fld.distance(rs), fld.r0)
    return -20.0 * np.log10(d) + 20.0 * math.log10(fld.S / fld.p_ref)


def photoresistor_J(rs, beta, fld: CostField):
    w1, w2, w3, w4, w5, w6 = fld.weights
    d = fld.distance(rs)
    beta = np.asarray(beta, dtype=float)
    return w1 * d**2 + w2 * beta**2 + w3 * d * beta + w4 * d + w5 * beta + w6


# ---------------------------------------------------------------- demodulators


# auxiliary signal for the cross-variance demodulator of the swept arm
ARM_AUX = TrigSignal([[(-1.0, "cos", 2 * math.pi)], [(-1.0, "cos", math.pi)]])


def arm_demodulator(choice: str, a: float) -> DemodSpec:
    """Gradient demodulator for the swept arm.

    ``hQ-verbatim`` divides the uncentered ``(cos phi, sin phi)`` by the
    centered covariance, as in the printed controller; ``hQ-centered``
    demodulates against the zero-mean dither instead; ``hR`` uses the
    auxiliary cosines.
    """
    ext = ExtendedDither(TriangleArmDither(), enumerate_basis(2, 1, 1))
    if choice == "hQ-verbatim":
        return synthesize(ext, a, "paper-verbatim")
    if choice == "hQ-centered":
        return synthesize(ext, a, "zero-mean")
    if choice == "hR":
        return synthesize(ext, a, "crossvariance", r=ARM_AUX)
    raise ParameterError(f"unknown demodulator {choice!r}; choose from {', '.join(DEMOD_CHOICES)}")


def control_law(demod: DemodSpec, fld: CostField, state: VehicleState, t: float, gains, a: float, omega: float):
    """``(v_c, omega_c) = diag(k_v, k_omega) h(omega t, a) J(r_s)``."""
    rs = sensor_position(state, t, a, omega)
    beta = sensor_orientation_angle(state, t, omega, fld.source, a) if fld.orientation_sensitive else None
    J = float(fld(rs, beta))
    h = demod.h(omega * t, a)
    return gains[0] * h[0] * J, gains[1] * h[1] * J


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to run one seeker simulation (SI units, radians)."""

    name: str
    x0: float
    y0: float
    theta0: float
    k_v: float
    k_omega: float
    omega: float
    a: float
    demod: str
    field: CostField
    horizon: float
    dt: float
    reach_radius: float = 0.5
    output_every: int = 1

    def __post_init__(self):
        if not self.omega > 0:
            raise ConfigError(f"dither rate omega must be positive, got {self.omega}")
        if not 0 < self.a < 1:
            raise ConfigError(f"arm length a must lie in (0, 1), got {self.a}")
        if not (self.horizon > 0 and self.dt > 0 and self.reach_radius > 0):
            raise ConfigError("horizon, dt and reach_radius must be positive")
        if self.output_every < 1:
            raise ConfigError("output_every must be >= 1")
        if self.demod not in DEMOD_CHOICES:
            raise ConfigError(f"unknown demod {self.demod!r}; choose from {', '.join(DEMOD_CHOICES)}")

    @classmethod
    def from_dict(cls, data: Mapping) -> ScenarioConfig:
        """Build from a parsed scenario file.

        Angles are given in degrees (``theta0``); the dither rate is ``omega``
        in rad/s or ``omega_rpm``.
        """
        data = dict(data)
        try:
            fdata = dict(data.pop("field"))
            kind = fdata.pop("kind")
            src = tuple(float(v) for v in fdata.pop("source"))
            if "weights" in fdata:
                fdata["weights"] = tuple(float(w) for w in fdata["weights"])
            fld = CostField(kind, src, **{k: (v if k == "weights" else float(v)) for k, v in fdata.items()})
            if "omega_rpm" in data:
                omega = float(data.pop("omega_rpm")) * 2 * math.pi / 60
            else:
                omega = float(data.pop("omega"))
            cfg = cls(
                name=str(data.pop("name", "scenario")),
                x0=float(data.pop("x0", 0.0)),
                y0=float(data.pop("y0", 0.0)),
                theta0=math.radians(float(data.pop("theta0", 0.0))),
                k_v=float(data.pop("k_v")),
                k_omega=float(data.pop("k_omega")),
                omega=omega,
                a=float(data.pop("a")),
                demod=str(data.pop("demod")),
                field=fld,
                horizon=float(data.pop("horizon")),
                dt=float(data.pop("dt")),
                reach_radius=float(data.pop("reach_radius", 0.5)),
                output_every=int(data.pop("output_every", 1)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing key {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        if data:
            raise ConfigError(f"unknown keys: {', '.join(sorted(data))}")
        return cfg

    @classmethod
    def from_yaml(cls, path) -> ScenarioConfig:
        with Path(path).open() as fh:
            try:
                data = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(data)

    def with_(self, **changes) -> ScenarioConfig:
        return replace(self, **changes)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    rows: np.ndarray  # (N, len(TRAJECTORY_COLUMNS))
    reach_time: float | None
    terminal_mean_distance: float
    path_length: float

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, TRAJECTORY_COLUMNS.index(name)]

    def metrics_line(self) -> str:
        reach = "none" if self.reach_time is None else f"{self.reach_time:.3f} s"
        return (
            f"reach time: {reach}; terminal mean distance: {self.terminal_mean_distance:.4f} m; "
            f"path length: {self.path_length:.4f} m"
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            for row in self.rows:
                w.writerow([repr(float(v)) for v in row])


class _Seeker:
    """Closed-loop right-hand side with scalar arithmetic for speed."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.demod = arm_demodulator(cfg.demod, cfg.a)
        self.sx, self.sy = cfg.field.source

    def outputs(self, t: float, x: np.ndarray):
        cfg = self.cfg
        tau = cfg.omega * t
        phi = arm_angle(tau)
        arm = x[2] + phi
        xs = x[0] + cfg.a * math.cos(arm)
        ys = x[1] + cfg.a * math.sin(arm)
        fld = cfg.field
        if fld.orientation_sensitive:
            beta = float(wrap_degrees(math.degrees(math.atan2(self.sy - ys, self.sx - xs) - arm)))
            J = float(fld((xs, ys), beta))
        else:
            J = float(fld((xs, ys)))
        h = self.demod.h(tau)
        return phi, xs, ys, J, cfg.k_v * h[0] * J, cfg.k_omega * h[1] * J

    def __call__(self, t, x):
        *_, v, w = self.outputs(t, x)
        th = x[2]
        return np.array([v * math.cos(th), v * math.sin(th), w])


def simulate_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Fixed-step RK4 run; metrics are accumulated at every step, rows are
    written every ``output_every`` steps."""
    seeker = _Seeker(cfg)
    steps = int(round(cfg.horizon / cfg.dt))
    x = np.array([cfg.x0, cfg.y0, cfg.theta0])
    src = np.array(cfg.field.source)
    tail_start = int(math.ceil(0.8 * steps))
    rows = []
    reach = None
    path = 0.0
    tail_sum, tail_n = 0.0, 0

    def row(t, x):
        phi, xs, ys, J, v, w = seeker.outputs(t, x)
        dist = math.hypot(x[0] - src[0], x[1] - src[1])
        return [t, x[0], x[1], x[2], phi, xs, ys, J, v, w, dist]

    def visit(i, t, x):
        nonlocal reach, tail_sum, tail_n
        dist = math.hypot(x[0] - src[0], x[1] - src[1])
        if reach is None and dist < cfg.reach_radius:
            reach = t
        if i >= tail_start:
            tail_sum += dist
            tail_n += 1

    rows.append(row(0.0, x))
    visit(0, 0.0, x)
    for i in range(steps):
        t = i * cfg.dt
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x_new = rk4_step(seeker, t, x, cfg.dt)
        except (ValueError, OverflowError):
            # math.cos of an infinite heading inside a stage
            x_new = np.full_like(x, np.nan)
        if not np.all(np.isfinite(x_new)):
            partial = ScenarioResult(cfg, np.array(rows), reach, float("nan"), path)
            raise DivergenceError(f"non-finite vehicle state at t={(i + 1) * cfg.dt:.6g}", t, x, partial)
        path += math.hypot(x_new[0] - x[0], x_new[1] - x[1])
        x = x_new
        t_new = (i + 1) * cfg.dt
        visit(i + 1, t_new, x)
        if (i + 1) % cfg.output_every == 0 or i + 1 == steps:
            rows.append(row(t_new, x))
    return ScenarioResult(cfg, np.array(rows), reach, tail_sum / max(tail_n, 1), path)
