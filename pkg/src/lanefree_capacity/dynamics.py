"""Linear two-DoF bicycle model with a longitudinal speed state.

State order is ``(r, beta, V, x, y, theta)`` and input order ``(a, delta)``.
The right-hand side is written once in :func:`rhs_terms` against generic
``cos``/``sin`` so the same expressions serve the numpy integrator and the
symbolic transcription in :mod:`lanefree_capacity.ocp`.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, field

import numpy as np

__all__ = [
    "ControlInput",
    "Limits",
    "LimitViolation",
    "PhysicalParams",
    "SpeedFloorError",
    "UnstableVehicleError",
    "V_FLOOR",
    "VehicleParams",
    "VehicleState",
    "check_limits",
    "derivative",
    "jacobian",
    "lateral_matrix",
    "rhs_terms",
    "rk4",
    "stability_derivatives",
    "state_rate",
    "step_rk4",
]

V_FLOOR = 0.5
N_STATES = 6
N_INPUTS = 2


class SpeedFloorError(ValueError):
    """Speed fell below the floor where the lateral model is undefined."""


class UnstableVehicleError(ValueError):
    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(f"open-loop lateral dynamics unstable, eigenvalues {self.eigenvalues}")


@dataclass(frozen=True)
class VehicleState:
    r: float = 0.0
    beta: float = 0.0
    V: float = 10.0
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    delta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    """Mass, yaw inertia and the six constant stability derivatives."""

    m: float
    I_z: float
    Y_r: float
    Y_beta: float
    Y_delta: float
    N_r: float
    N_beta: float
    N_delta: float
    V_nom: float = 10.0

    def __post_init__(self):
        if not (self.m > 0 and self.I_z > 0):
            raise ValueError("mass and yaw inertia must be positive")
        eig = np.linalg.eigvals(lateral_matrix(self, self.V_nom))
        if np.any(eig.real >= 0):
            raise UnstableVehicleError(eig)


@dataclass(frozen=True)
class PhysicalParams:
    m: float = 1500.0
    I_z: float = 2500.0
    C_f: float = 80000.0
    C_r: float = 80000.0
    l_f: float = 1.2
    l_r: float = 1.4


@dataclass(frozen=True)
class Limits:
    V_min: float = V_FLOOR
    V_max: float = 25.0
    a_max: float = 3.0
    delta_max: float = 0.6
    r_max: float = 1.0
    beta_max: float = 0.2

    def __post_init__(self):
        if self.V_min <= 0:
            raise ValueError("V_min must be positive")
        for name in ("V_max", "a_max", "delta_max", "r_max", "beta_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.V_max < self.V_min:
            raise ValueError("V_max below V_min")


@dataclass(frozen=True)
class LimitViolation:
    bound: str
    value: float
    limit: float
    margin: float = field(default=0.0)


def lateral_matrix(p: VehicleParams, V: float) -> np.ndarray:
    """State matrix of the ``(r, beta)`` subsystem at speed ``V``."""
    mV = p.m * V
    return np.array([
        [p.N_r / p.I_z, p.N_beta / p.I_z],
        [p.Y_r / mV - 1.0, p.Y_beta / mV],
    ])


def stability_derivatives(phys: PhysicalParams, V_nom: float) -> VehicleParams:
    """Linear-tyre stability derivatives frozen at ``V_nom``."""
    if min(phys.C_f, phys.C_r, phys.l_f, phys.l_r, phys.m, phys.I_z) <= 0:
        raise ValueError("physical parameters must be positive")
    if V_nom < V_FLOOR:
        raise SpeedFloorError(f"V_nom={V_nom} below floor {V_FLOOR}")
    Cf, Cr, lf, lr = phys.C_f, phys.C_r, phys.l_f, phys.l_r
    return VehicleParams(
        m=phys.m,
        I_z=phys.I_z,
        Y_r=(lr * Cr - lf * Cf) / V_nom,
        Y_beta=-(Cf + Cr),
        Y_delta=Cf,
        N_r=-(lf**2 * Cf + lr**2 * Cr) / V_nom,
        N_beta=lr * Cr - lf * Cf,
        N_delta=lf * Cf,
        V_nom=V_nom,
    )


def rhs_terms(x, u, p: VehicleParams, cos=math.cos, sin=math.sin) -> list:
    r, beta, V, _, _, theta = (x[k] for k in range(N_STATES))
    a, delta = u[0], u[1]
    mV = p.m * V
    return [
        p.N_r / p.I_z * r + p.N_beta / p.I_z * beta + p.N_delta / p.I_z * delta,
        (p.Y_r / mV - 1.0) * r + p.Y_beta / mV * beta + p.Y_delta / mV * delta,
        a,
        V * cos(theta),
        V * sin(theta),
        r,
    ]


def state_rate(x: np.ndarray, u: np.ndarray, p: VehicleParams) -> np.ndarray:
    """Array form of :func:`derivative`; raises if V is below the floor."""
    if not x[2] >= V_FLOOR:
        raise SpeedFloorError(f"V={x[2]} below floor {V_FLOOR}")
    return np.array(rhs_terms(x, u, p), dtype=float)


def derivative(s: VehicleState, u: ControlInput, p: VehicleParams) -> np.ndarray:
    return state_rate(s.as_array(), u.as_array(), p)


def jacobian(x, u, p: VehicleParams):
    """Analytic ``(d f/d x, d f/d u)`` of the right-hand side, shapes (6, 6) and (6, 2)."""
    r, beta, V, _, _, theta = (float(v) for v in x)
    delta = float(u[1])
    m, Iz = p.m, p.I_z
    Jx = np.zeros((N_STATES, N_STATES))
    Ju = np.zeros((N_STATES, N_INPUTS))
    Jx[0, 0] = p.N_r / Iz
    Jx[0, 1] = p.N_beta / Iz
    Ju[0, 1] = p.N_delta / Iz
    Jx[1, 0] = p.Y_r / (m * V) - 1.0
    Jx[1, 1] = p.Y_beta / (m * V)
    Jx[1, 2] = -(p.Y_r * r + p.Y_beta * beta + p.Y_delta * delta) / (m * V**2)
    Ju[1, 1] = p.Y_delta / (m * V)
    Ju[2, 0] = 1.0
    Jx[3, 2] = math.cos(theta)
    Jx[3, 5] = -V * math.sin(theta)
    Jx[4, 2] = math.sin(theta)
    Jx[4, 5] = V * math.cos(theta)
    Jx[5, 0] = 1.0
    return Jx, Ju


def rk4(f, x, u, dt):
    """One classical Runge-Kutta step of ``x' = f(x, u)`` with ``u`` held."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_rk4(s: VehicleState, u: ControlInput, p: VehicleParams, dt: float) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    x_next = rk4(lambda x, uu: state_rate(x, uu, p), s.as_array(), u.as_array(), dt)
    return VehicleState.from_array(x_next)


def check_limits(s: VehicleState, u: ControlInput, lim: Limits) -> list[LimitViolation]:
    """All admissible-range violations; the ranges are closed."""
    out = []
    if s.V < lim.V_min:
        out.append(LimitViolation("V_min", s.V, lim.V_min, lim.V_min - s.V))
    if s.V > lim.V_max:
        out.append(LimitViolation("V_max", s.V, lim.V_max, s.V - lim.V_max))
    for name, value, bound in (
        ("a_max", u.a, lim.a_max),
        ("delta_max", u.delta, lim.delta_max),
        ("r_max", s.r, lim.r_max),
        ("beta_max", s.beta, lim.beta_max),
    ):
        if abs(value) > bound:
            out.append(LimitViolation(name, value, bound, abs(value) - bound))
    return out
