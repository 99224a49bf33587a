"""Time-optimal lane-free crossing: transcription, initial guess, solve, and
primal validation.

The free final time is handled by time scaling: every shooting interval
lasts ``t_f / K`` and ``t_f`` is itself a decision variable. Collision
avoidance between vehicle rectangles, and between vehicles and road blocks,
is written in dual form (multipliers ``lambda`` per face plus a separating
direction ``s``) and enforced at the shooting nodes. Safety between nodes is
checked afterwards against the exact distance oracle.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Optional

import casadi as ca
import numpy as np

from .dynamics import (
    ControlInput,
    Limits,
    SpeedFloorError,
    VehicleParams,
    VehicleState,
    check_limits,
    rhs_terms,
    rk4,
    step_rk4,
)
from .geometry import (
    Polytope,
    Pose,
    VehicleShape,
    closest_points,
    distance_oracle,
    optimal_dual_pair,
    rectangle_halfspaces,
    rectangle_vertices,
    vehicle_polytope,
    wrap_angle,
)

log = logging.getLogger(__name__)

# Per dual block: 4 + 4 face multipliers and the 2-vector s.
DUAL_BLOCK = 10
T_F_MAX = 60.0


class ScenarioError(ValueError):
    """The scenario violates a precondition (e.g. overlapping start poses)."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class VehicleSpec:
    shape: VehicleShape
    params: VehicleParams
    limits: Limits
    start: Pose
    v0: float
    goal: Pose
    v_goal: Optional[float] = None
    # (ux, uy, offset): the vehicle has fully crossed once its rear edge
    # satisfies ux*x + uy*y >= offset.
    exit_line: Optional[tuple] = None
    label: str = ""

    @property
    def goal_theta(self) -> float:
        """Goal heading unwrapped to lie within pi of the start heading."""
        return self.start.theta + wrap_angle(self.goal.theta - self.start.theta)


@dataclass(frozen=True)
class CrossingScenario:
    vehicles: tuple
    roads: tuple = ()
    d_min: float = 0.1
    d_rmin: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        object.__setattr__(self, "roads", tuple(self.roads))

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    def check(self):
        """Raise :class:`ScenarioError` unless start and goal footprints are
        separated from each other and from the road blocks."""
        for which in ("start", "goal"):
            polys = [vehicle_polytope(getattr(v, which), v.shape) for v in self.vehicles]
            for i, j in combinations(range(len(polys)), 2):
                d = distance_oracle(polys[i], polys[j])
                if d < self.d_min:
                    raise ScenarioError(
                        f"{which} footprints of vehicles {i} and {j} are {d:.3f} m apart (< d_min={self.d_min})",
                        pair=(i, j),
                    )
            for i, P in enumerate(polys):
                for r, R in enumerate(self.roads):
                    d = distance_oracle(P, R)
                    if d < self.d_rmin:
                        raise ScenarioError(
                            f"{which} footprint of vehicle {i} is {d:.3f} m from road block {r} "
                            f"(< d_rmin={self.d_rmin})",
                            pair=(i, f"road{r}"),
                        )


@dataclass(frozen=True)
class TranscriptionConfig:
    K: int = 40
    t_f_bounds: Optional[tuple] = None
    tol: float = 1e-6
    feas_tol: float = 1e-6
    max_iter: int = 3000
    stall_window: Optional[int] = 50
    print_level: int = 0
    route: str = "lane"
    # Scale on the half-interval sweep added to every node margin; 0 enforces
    # the bare margins at the nodes only.
    sweep_factor: float = 1.0
    # Monotone barrier updates from a small initial barrier parameter converge
    # far faster than the adaptive rule on the dual-constraint blocks.
    mu_init: float = 1e-2
    # IPOPT is restarted from its last iterate after this many iterations.
    restart_iter: int = 250

    def __post_init__(self):
        if self.restart_iter < 1 or self.max_iter < 1:
            raise ValueError("iteration limits must be positive")
        if self.K < 10:
            raise ValueError("K must be at least 10")
        if self.t_f_bounds is not None:
            lo, hi = self.t_f_bounds
            if not (0 < lo < hi):
                raise ValueError("t_f bounds must be positive and ordered")
        if self.route not in ("lane", "straight"):
            raise ValueError("route must be 'lane' or 'straight'")


def _min_time_straight(dist: float, v0: float, v_max: float, a_max: float) -> float:
    """Minimum time to cover ``dist`` along a line: full throttle, then cruise."""
    if dist <= 0:
        return 0.0
    v0 = min(v0, v_max)
    t_acc = (v_max - v0) / a_max
    d_acc = v0 * t_acc + 0.5 * a_max * t_acc**2
    if d_acc >= dist:
        return (-v0 + math.sqrt(v0**2 + 2 * a_max * dist)) / a_max
    return t_acc + (dist - d_acc) / v_max


def straight_lower_bound(scn: CrossingScenario) -> float:
    out = 0.0
    for v in scn.vehicles:
        dist = math.hypot(v.goal.x - v.start.x, v.goal.y - v.start.y)
        out = max(out, _min_time_straight(dist, v.v0, v.limits.V_max, v.limits.a_max))
    return out


def t_f_bounds(scn: CrossingScenario, cfg: TranscriptionConfig) -> tuple:
    if cfg.t_f_bounds is not None:
        return tuple(cfg.t_f_bounds)
    return (max(0.5 * straight_lower_bound(scn), 0.05), T_F_MAX)


# ---------------------------------------------------------------------------
# Transcription


@dataclass
class NLP:
    """Symbolic NLP plus the index maps needed to pack and unpack iterates."""

    scenario: CrossingScenario
    config: TranscriptionConfig
    w: ca.SX
    f: ca.SX
    g: ca.SX
    lbw: np.ndarray
    ubw: np.ndarray
    lbg: np.ndarray
    ubg: np.ndarray
    i_tf: int
    i_states: list
    i_inputs: list
    i_duals: dict
    g_groups: dict = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return self.w.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.g.shape[0]

    @property
    def pair_keys(self) -> list:
        return [k for k in self.i_duals if k[0] == "pair"]

    @property
    def road_keys(self) -> list:
        return [k for k in self.i_duals if k[0] == "road"]

    def pack(self, guess: "Trajectories") -> np.ndarray:
        w0 = np.zeros(self.n_vars)
        w0[self.i_tf] = guess.t_f
        for i, idx in enumerate(self.i_states):
            w0[idx] = guess.states[i]
        for i, idx in enumerate(self.i_inputs):
            w0[idx] = guess.inputs[i]
        for key, idx in self.i_duals.items():
            if key in guess.duals:
                w0[idx] = guess.duals[key]
        return w0

    def unpack(self, w: np.ndarray) -> "Trajectories":
        w = np.asarray(w, dtype=float).reshape(-1)
        return Trajectories(
            t_f=float(w[self.i_tf]),
            states=[w[idx] for idx in self.i_states],
            inputs=[w[idx] for idx in self.i_inputs],
            duals={k: w[idx] for k, idx in self.i_duals.items()},
        )


@dataclass
class Trajectories:
    """Node-sampled iterate: states (K+1, 6), inputs (K, 2) and dual blocks
    (K+1, 10) laid out as ``[lam_pq(4), lam_qp(4), s(2)]``."""

    t_f: float
    states: list
    inputs: list
    duals: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.inputs[0].shape[0] if self.inputs else 0

    def resampled(self, K_new: int) -> "Trajectories":
        """Linear resampling onto a new node count (used when refining K)."""
        K = self.K
        t_old = np.linspace(0.0, 1.0, K + 1)
        t_new = np.linspace(0.0, 1.0, K_new + 1)
        tu_old = (np.arange(K) + 0.5) / K
        tu_new = (np.arange(K_new) + 0.5) / K_new

        def interp(arr, src, dst):
            return np.column_stack([np.interp(dst, src, arr[:, c]) for c in range(arr.shape[1])])

        return Trajectories(
            t_f=self.t_f,
            states=[interp(x, t_old, t_new) for x in self.states],
            inputs=[interp(u, tu_old, tu_new) for u in self.inputs],
            duals={k: interp(d, t_old, t_new) for k, d in self.duals.items()},
        )


def _sym_rect(xk, shape: VehicleShape):
    A, b = rectangle_halfspaces(xk[3], xk[4], xk[5], shape.length, shape.width, cos=ca.cos, sin=ca.sin)
    return A, b


_SMOOTH = 1e-6


def _sweep_terms(xk, shape: VehicleShape):
    """Planar velocity and the rotational speed bound of the farthest corner."""
    rho = 0.5 * math.hypot(shape.length, shape.width)
    vel = (xk[2] * ca.cos(xk[5]), xk[2] * ca.sin(xk[5]))
    return vel, rho * ca.sqrt(xk[0] ** 2 + _SMOOTH)


def _dual_constraints(A_p, b_p, A_q, b_q, blk, margin):
    """Separation >= margin, two stationarity residuals and ``||s||^2 <= 1``."""
    lam_p, lam_q, s = blk[0:4], blk[4:8], blk[8:10]
    value = -sum(b_p[k] * lam_p[k] for k in range(4)) - sum(b_q[k] * lam_q[k] for k in range(4))
    r1 = [sum(A_p[k][c] * lam_p[k] for k in range(4)) + s[c] for c in range(2)]
    r2 = [sum(A_q[k][c] * lam_q[k] for k in range(4)) - s[c] for c in range(2)]
    return value - margin, r1, r2, s[0] ** 2 + s[1] ** 2


def transcribe(scn: CrossingScenario, cfg: TranscriptionConfig = TranscriptionConfig()) -> NLP:
    scn.check()
    K = cfg.K
    nv = scn.n_vehicles
    tf_lo, tf_hi = t_f_bounds(scn, cfg)

    # Variable layout: [t_f | per vehicle: states (K+1)*6, inputs K*2 | dual blocks].
    offset = 1
    i_states, i_inputs = [], []
    for _ in range(nv):
        i_states.append(offset + np.arange((K + 1) * 6).reshape(K + 1, 6))
        offset += (K + 1) * 6
        i_inputs.append(offset + np.arange(K * 2).reshape(K, 2))
        offset += K * 2
    i_duals = {}
    for i, j in combinations(range(nv), 2):
        i_duals[("pair", i, j)] = offset + np.arange((K + 1) * DUAL_BLOCK).reshape(K + 1, DUAL_BLOCK)
        offset += (K + 1) * DUAL_BLOCK
    for i in range(nv):
        for r in range(len(scn.roads)):
            i_duals[("road", i, r)] = offset + np.arange((K + 1) * DUAL_BLOCK).reshape(K + 1, DUAL_BLOCK)
            offset += (K + 1) * DUAL_BLOCK
    n = offset

    w = ca.SX.sym("w", n)
    lbw = np.full(n, -np.inf)
    ubw = np.full(n, np.inf)
    lbw[0], ubw[0] = tf_lo, tf_hi
    tf = w[0]
    dt = tf / K

    g, lbg, ubg = [], [], []
    groups = {}

    def add(name, exprs, lo, hi):
        start = sum(int(e.shape[0]) for e in g)
        e = ca.vertcat(*exprs) if isinstance(exprs, (list, tuple)) else exprs
        g.append(e)
        m = int(e.shape[0])
        lbg.append(np.broadcast_to(lo, (m,)).astype(float))
        ubg.append(np.broadcast_to(hi, (m,)).astype(float))
        groups.setdefault(name, []).append(np.arange(start, start + m))

    xs_sym = []
    for i, veh in enumerate(scn.vehicles):
        p, lim = veh.params, veh.limits
        xsym = ca.SX.sym("x", 6)
        usym = ca.SX.sym("u", 2)
        hsym = ca.SX.sym("h")

        def f(x, u, p=p):
            return ca.vertcat(*rhs_terms(x, u, p, cos=ca.cos, sin=ca.sin))

        step = ca.Function("rk4", [xsym, usym, hsym], [rk4(f, xsym, usym, hsym)])
        X = [w[i_states[i][k]] for k in range(K + 1)]
        U = [w[i_inputs[i][k]] for k in range(K)]
        xs_sym.append(X)
        for k in range(K):
            add("defect", [X[k + 1] - step(X[k], U[k], dt)], 0.0, 0.0)

        ix, iu = i_states[i], i_inputs[i]
        lbw[ix[:, 0]], ubw[ix[:, 0]] = -lim.r_max, lim.r_max
        lbw[ix[:, 1]], ubw[ix[:, 1]] = -lim.beta_max, lim.beta_max
        lbw[ix[:, 2]], ubw[ix[:, 2]] = lim.V_min, lim.V_max
        lbw[iu[:, 0]], ubw[iu[:, 0]] = -lim.a_max, lim.a_max
        lbw[iu[:, 1]], ubw[iu[:, 1]] = -lim.delta_max, lim.delta_max
        # Boundary conditions.
        x0 = [0.0, 0.0, veh.v0, veh.start.x, veh.start.y, veh.start.theta]
        lbw[ix[0]] = ubw[ix[0]] = x0
        lbw[ix[K, 3:]] = ubw[ix[K, 3:]] = [veh.goal.x, veh.goal.y, veh.goal_theta]
        if veh.v_goal is not None:
            lbw[ix[K, 2]] = ubw[ix[K, 2]] = veh.v_goal

    for key, idx in i_duals.items():
        # For rectangles the optimal certificate loads at most two perpendicular
        # faces, so each multiplier is at most ||s|| <= 1; the cap removes the
        # unbounded opposite-face direction without cutting off feasibility.
        lbw[idx[:, :8]] = 0.0
        ubw[idx[:, :8]] = 1.0
        lbw[idx[:, 8:]] = -1.0
        ubw[idx[:, 8:]] = 1.0

    for k in range(K + 1):
        rects = [_sym_rect(xs_sym[i][k], scn.vehicles[i].shape) for i in range(nv)]
        sweeps = [_sweep_terms(xs_sym[i][k], scn.vehicles[i].shape) for i in range(nv)]
        half = 0.5 * dt * cfg.sweep_factor
        for key, idx in i_duals.items():
            blk = w[idx[k]]
            if key[0] == "pair":
                _, i, j = key
                (A_p, b_p), (A_q, b_q) = rects[i], rects[j]
                (vi, spin_i), (vj, spin_j) = sweeps[i], sweeps[j]
                rel = ca.sqrt((vi[0] - vj[0]) ** 2 + (vi[1] - vj[1]) ** 2 + _SMOOTH)
                margin = scn.d_min + half * (rel + spin_i + spin_j)
            else:
                _, i, r = key
                A_p, b_p = rects[i]
                road = scn.roads[r]
                A_q, b_q = road.A.tolist(), road.b.tolist()
                vi, spin_i = sweeps[i]
                margin = scn.d_rmin + half * (ca.sqrt(vi[0] ** 2 + vi[1] ** 2 + _SMOOTH) + spin_i)
            sep, r1, r2, snorm = _dual_constraints(A_p, b_p, A_q, b_q, blk, margin)
            add(f"{key[0]}_sep", [sep], 0.0, np.inf)
            add(f"{key[0]}_stat", r1 + r2, 0.0, 0.0)
            add(f"{key[0]}_norm", [snorm], -np.inf, 1.0)

    g_all = ca.vertcat(*g) if g else ca.SX(0, 1)
    return NLP(
        scenario=scn,
        config=cfg,
        w=w,
        f=tf,
        g=g_all,
        lbw=lbw,
        ubw=ubw,
        lbg=np.concatenate(lbg) if lbg else np.zeros(0),
        ubg=np.concatenate(ubg) if ubg else np.zeros(0),
        i_tf=0,
        i_states=i_states,
        i_inputs=i_inputs,
        i_duals=i_duals,
        g_groups={k: np.concatenate(v) for k, v in groups.items()},
    )


# ---------------------------------------------------------------------------
# Initial guess


def _lane_path(veh: VehicleSpec, n: int):
    """Positions along start -> (lane corner) -> goal at ``n`` equal arc-length steps."""
    p0 = np.array([veh.start.x, veh.start.y])
    p1 = np.array([veh.goal.x, veh.goal.y])
    d0 = np.array([math.cos(veh.start.theta), math.sin(veh.start.theta)])
    d1 = np.array([math.cos(veh.goal.theta), math.sin(veh.goal.theta)])
    M = np.column_stack([d0, -d1])
    pts = [p0, p1]
    if abs(np.linalg.det(M)) > 1e-6:
        t0, t1 = np.linalg.solve(M, p1 - p0)
        if t0 > 0 and t1 > 0:
            pts = [p0, p0 + t0 * d0, p1]
    pts = np.array(pts)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])


def initial_guess(scn: CrossingScenario, cfg: TranscriptionConfig = TranscriptionConfig()) -> Trajectories:
    """Constant-speed interpolation from start to goal pose with dual seeds.

    ``cfg.route == "straight"`` interpolates positions on the straight
    segment; ``"lane"`` follows the incoming lane to where it meets the
    outgoing lane, which keeps turning vehicles off the corner blocks.
    """
    K = cfg.K
    lo, hi = t_f_bounds(scn, cfg)
    t_f = 0.0
    for v in scn.vehicles:
        dist = math.hypot(v.goal.x - v.start.x, v.goal.y - v.start.y)
        t_f = max(t_f, dist / v.v0)
    t_f = min(max(t_f, lo), hi)

    tau = np.linspace(0.0, 1.0, K + 1)
    states, inputs = [], []
    for v in scn.vehicles:
        if cfg.route == "lane":
            xy = _lane_path(v, K + 1)
        else:
            xy = np.column_stack([
                v.start.x + tau * (v.goal.x - v.start.x),
                v.start.y + tau * (v.goal.y - v.start.y),
            ])
        th = v.start.theta + tau * (v.goal_theta - v.start.theta)
        X = np.zeros((K + 1, 6))
        X[:, 2] = min(max(v.v0, v.limits.V_min), v.limits.V_max)
        X[:, 3:5] = xy
        X[:, 5] = th
        states.append(X)
        inputs.append(np.zeros((K, 2)))
    return Trajectories(t_f=t_f, states=states, inputs=inputs, duals=seed_duals(scn, states))


def seed_duals(scn: CrossingScenario, states) -> dict:
    """Oracle-optimal dual blocks for every pair and vehicle-road key at
    every node of the given state trajectories."""
    K = states[0].shape[0] - 1
    duals = {}
    nv = scn.n_vehicles
    for k in range(K + 1):
        polys = [
            vehicle_polytope(Pose(states[i][k, 3], states[i][k, 4], states[i][k, 5]), scn.vehicles[i].shape)
            for i in range(nv)
        ]
        for i, j in combinations(range(nv), 2):
            d = optimal_dual_pair(polys[i], polys[j])
            duals.setdefault(("pair", i, j), np.zeros((K + 1, DUAL_BLOCK)))[k] = np.concatenate([d.lam_pq, d.lam_qp, d.s])
        for i in range(nv):
            for r, road in enumerate(scn.roads):
                d = optimal_dual_pair(polys[i], road)
                duals.setdefault(("road", i, r), np.zeros((K + 1, DUAL_BLOCK)))[k] = np.concatenate([d.lam_pq, d.lam_qp, d.s])
    return duals


def padded_guess(scn: CrossingScenario, cfg: TranscriptionConfig, prev: Trajectories) -> Trajectories:
    """Warm start for a scenario that extends ``prev``'s by extra vehicles.

    The first vehicles keep their previous trajectories (time-rescaled onto
    the new node grid); added vehicles get the default guess; every dual
    block is re-seeded from the oracle.
    """
    base = initial_guess(scn, cfg)
    old = prev if prev.K == cfg.K else prev.resampled(cfg.K)
    n_old = len(old.states)
    if n_old > scn.n_vehicles:
        raise ValueError("previous solution has more vehicles than the scenario")
    states = [x.copy() for x in old.states] + base.states[n_old:]
    inputs = [u.copy() for u in old.inputs] + base.inputs[n_old:]
    lo, hi = t_f_bounds(scn, cfg)
    t_f = min(max(old.t_f, base.t_f, lo), hi)
    return Trajectories(t_f=t_f, states=states, inputs=inputs, duals=seed_duals(scn, states))


# ---------------------------------------------------------------------------
# Solve


@dataclass
class IterInfo:
    iteration: int
    objective: float
    primal_infeasibility: float


STALL_FLOOR = 1e-3


class _IterationHook(ca.Callback):
    """Forwards IPOPT iterates to a user callback and flags feasibility stalls.

    A stall is ``window`` consecutive iterations without a 1 % improvement of
    the best primal infeasibility seen, while that best is still above
    ``STALL_FLOOR``. Feasible runs routinely wander away from a nearly feasible
    point for a while, so only runs that never got close are cut off.
    """

    def __init__(self, nlp: NLP, user_cb, window, tol, it0: int = 0):
        ca.Callback.__init__(self)
        self.nx, self.ng = nlp.n_vars, nlp.n_constraints
        self.lbg, self.ubg = nlp.lbg, nlp.ubg
        self.user_cb, self.window, self.tol = user_cb, window, tol
        self.it0 = it0
        self.it = 0
        self.best = math.inf
        self.best_it = 0
        self.stalled = False
        self.construct("iterhook", {})

    def get_n_in(self):
        return ca.nlpsol_n_out()

    def get_n_out(self):
        return 1

    def get_name_in(self, i):
        return ca.nlpsol_out(i)

    def get_name_out(self, i):
        return "ret"

    def get_sparsity_in(self, i):
        name = ca.nlpsol_out(i)
        if name == "f":
            return ca.Sparsity.dense(1)
        if name in ("x", "lam_x"):
            return ca.Sparsity.dense(self.nx)
        if name in ("g", "lam_g"):
            return ca.Sparsity.dense(self.ng)
        return ca.Sparsity(0, 0)

    def eval(self, arg):
        g = np.asarray(arg[2]).reshape(-1)
        inf_pr = float(np.max(np.maximum(self.lbg - g, g - self.ubg), initial=0.0))
        if self.user_cb is not None:
            self.user_cb(IterInfo(self.it0 + self.it, float(arg[1]), inf_pr))
        if inf_pr < 0.99 * self.best:
            self.best, self.best_it = inf_pr, self.it
        self.it += 1
        if self.window and self.best > STALL_FLOOR and self.it - self.best_it > self.window:
            self.stalled = True
            return [1]
        return [0]


@dataclass
class OcpSolution:
    status: str
    t_f: float
    states: list
    inputs: list
    duals: dict
    J: float
    K: int
    solver_status: str = ""
    iterations: int = 0
    solve_time: float = 0.0
    max_violation: float = math.nan

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_f, self.K + 1)

    @property
    def n_vehicles(self) -> int:
        return len(self.states)

    def state(self, i: int, k: int) -> VehicleState:
        return VehicleState.from_array(self.states[i][k])

    def control(self, i: int, k: int) -> ControlInput:
        return ControlInput(*self.inputs[i][k])

    def dual_pair(self, key, k: int):
        from .geometry import DualPair

        blk = self.duals[key][k]
        return DualPair(blk[0:4], blk[4:8], blk[8:10])

    def as_guess(self) -> Trajectories:
        return Trajectories(self.t_f, [x.copy() for x in self.states], [u.copy() for u in self.inputs],
                            {k: d.copy() for k, d in self.duals.items()})


_INFEASIBLE = {
    "Infeasible_Problem_Detected",
    "Restoration_Failed",
    "Local_Infeasibility",
}
_MAX_ITER = {"Maximum_Iterations_Exceeded", "Maximum_CpuTime_Exceeded", "Maximum_WallTime_Exceeded"}


def _ipopt_run(nlp: NLP, w0: np.ndarray, hook, max_iter: int):
    cfg = nlp.config
    opts = {
        "print_time": False,
        "iteration_callback": hook,
        "ipopt.print_level": cfg.print_level,
        "ipopt.sb": "yes",
        "ipopt.tol": cfg.tol,
        "ipopt.constr_viol_tol": cfg.feas_tol,
        "ipopt.max_iter": max_iter,
        "ipopt.mu_strategy": "monotone",
        "ipopt.mu_init": cfg.mu_init,
    }
    solver = ca.nlpsol("crossing", "ipopt", {"x": nlp.w, "f": nlp.f, "g": nlp.g}, opts)
    res = solver(x0=w0, lbx=nlp.lbw, ubx=nlp.ubw, lbg=nlp.lbg, ubg=nlp.ubg)
    return res, solver.stats()


def solve(nlp: NLP, guess: Trajectories, callback: Optional[Callable[[IterInfo], None]] = None) -> OcpSolution:
    """Solve with IPOPT and classify the outcome as optimal / infeasible / max_iter.

    IPOPT runs in chunks of ``cfg.restart_iter`` iterations. A chunk that hits
    its cap or stalls is restarted from its last iterate with fresh
    multipliers and barrier parameter, which breaks the cycling the
    degenerate dual blocks can cause near a solution. The problem is declared
    infeasible only when two restarted chunks in a row stall without improving
    the best primal infeasibility of earlier chunks, and no earlier chunk got
    below ``STALL_FLOOR``.
    """
    cfg = nlp.config
    w0 = np.clip(nlp.pack(guess), nlp.lbw, nlp.ubw)
    total_iters, best_seen = 0, math.inf
    stalled, strikes = False, 0
    ret = ""
    t0 = time.perf_counter()
    while True:
        chunk = min(cfg.restart_iter, cfg.max_iter - total_iters)
        hook = _IterationHook(nlp, callback, cfg.stall_window, cfg.feas_tol, it0=total_iters)
        res, stats = _ipopt_run(nlp, w0, hook, chunk)
        total_iters += int(stats.get("iter_count", 0))
        ret = stats.get("return_status", "")
        w_opt = np.asarray(res["x"]).reshape(-1)
        if ret not in _MAX_ITER and not hook.stalled:
            break
        if hook.stalled and best_seen > STALL_FLOOR and not hook.best < 0.99 * best_seen:
            strikes += 1
            if strikes >= 2:
                stalled = True
                break
        else:
            strikes = 0
        best_seen = min(best_seen, hook.best)
        if total_iters >= cfg.max_iter:
            break
        log.info("restarting IPOPT after %d iterations (%s)", total_iters, "stall" if hook.stalled else ret)
        w0 = np.clip(w_opt, nlp.lbw, nlp.ubw)
    elapsed = time.perf_counter() - t0
    g_val = np.asarray(res["g"]).reshape(-1)
    viol = max(
        float(np.max(np.maximum(nlp.lbg - g_val, g_val - nlp.ubg), initial=0.0)),
        float(np.max(np.maximum(nlp.lbw - w_opt, w_opt - nlp.ubw), initial=0.0)),
    )
    if stalled:
        status = "infeasible"
    elif ret in _MAX_ITER or (hook.stalled and total_iters >= cfg.max_iter):
        status = "max_iter"
    elif ret in _INFEASIBLE:
        status = "infeasible"
    elif viol <= 10 * cfg.feas_tol and ret in ("Solve_Succeeded", "Solved_To_Acceptable_Level"):
        status = "optimal"
    else:
        status = "infeasible"
    traj = nlp.unpack(w_opt)
    log.info("solve: %s (%s) t_f=%.4f iters=%d viol=%.2e %.1fs", status, ret, traj.t_f,
             total_iters, viol, elapsed)
    return OcpSolution(
        status=status,
        t_f=traj.t_f,
        states=traj.states,
        inputs=traj.inputs,
        duals=traj.duals,
        J=float(np.asarray(res["f"]).item()),
        K=nlp.config.K,
        solver_status=ret,
        iterations=total_iters,
        solve_time=elapsed,
        max_violation=viol,
    )


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationReport:
    passed: bool
    worst_pair_margin: float
    worst_road_margin: float
    worst_pair: Optional[tuple]
    worst_road: Optional[tuple]
    limit_violations: list
    terminal_pose_error: float
    max_defect: float
    completion_times: list
    dense_times: np.ndarray = field(repr=False, default=None)
    messages: list = field(default_factory=list)


def dense_trajectories(sol: OcpSolution, scn: CrossingScenario, dense_factor: int = 10):
    """Re-integrate each interval from its node under zero-order-hold inputs.

    Returns ``(times, states)`` where ``states[i]`` has shape (K*dense_factor+1, 6),
    and the largest mismatch between the dense end-of-interval state and the
    next node.
    """
    K = sol.K
    dt = sol.t_f / K
    h = dt / dense_factor
    times = np.linspace(0.0, sol.t_f, K * dense_factor + 1)
    out, worst = [], 0.0
    for i, veh in enumerate(scn.vehicles):
        X = np.zeros((K * dense_factor + 1, 6))
        X[0] = sol.states[i][0]
        for k in range(K):
            s = VehicleState.from_array(sol.states[i][k])
            u = ControlInput(*sol.inputs[i][k])
            for m in range(dense_factor):
                s = step_rk4(s, u, veh.params, h)
                X[k * dense_factor + m + 1] = s.as_array()
            worst = max(worst, float(np.max(np.abs(s.as_array() - sol.states[i][k + 1]))))
        out.append(X)
    return times, out, worst


def _completion_time(times, X, veh: VehicleSpec):
    if veh.exit_line is None:
        return float(times[-1])
    ux, uy, off = veh.exit_line
    for t, row in zip(times, X):
        verts = rectangle_vertices(row[3], row[4], row[5], veh.shape.length, veh.shape.width)
        if np.min(verts @ np.array([ux, uy])) >= off - 1e-9:
            return float(t)
    return math.nan


def validate_solution(sol: OcpSolution, scn: CrossingScenario, dense_factor: int = 10,
                      tol: float = 1e-3) -> ValidationReport:
    """Check a solution against the exact distance oracle on a dense time grid."""
    msgs = []
    if sol.status != "optimal":
        msgs.append(f"solution status is {sol.status}")
    try:
        times, dense, max_defect = dense_trajectories(sol, scn, dense_factor)
    except SpeedFloorError as exc:
        return ValidationReport(False, -math.inf, -math.inf, None, None, [], math.inf, math.inf, [], None,
                                [f"re-integration failed: {exc}"])
    nv = scn.n_vehicles
    worst_pair, worst_pair_at = math.inf, None
    worst_road, worst_road_at = math.inf, None
    for n, t in enumerate(times):
        polys = [vehicle_polytope(Pose(X[n, 3], X[n, 4], X[n, 5]), scn.vehicles[i].shape) for i, X in enumerate(dense)]
        for i, j in combinations(range(nv), 2):
            m = distance_oracle(polys[i], polys[j]) - scn.d_min
            if m < worst_pair:
                worst_pair, worst_pair_at = m, (i, j, float(t))
        for i in range(nv):
            for r, road in enumerate(scn.roads):
                m = distance_oracle(polys[i], road) - scn.d_rmin
                if m < worst_road:
                    worst_road, worst_road_at = m, (i, r, float(t))

    lim_viol = []
    for i, veh in enumerate(scn.vehicles):
        for k in range(sol.K):
            for v in check_limits(sol.state(i, k), sol.control(i, k), veh.limits):
                if v.margin > tol:
                    lim_viol.append((i, k, v))
        last = sol.state(i, sol.K)
        for v in check_limits(last, ControlInput(), veh.limits):
            if v.margin > tol:
                lim_viol.append((i, sol.K, v))

    term = 0.0
    for i, veh in enumerate(scn.vehicles):
        xK = sol.states[i][-1]
        term = max(term, abs(xK[3] - veh.goal.x), abs(xK[4] - veh.goal.y), abs(wrap_angle(xK[5] - veh.goal.theta)))

    completion = [_completion_time(times, dense[i], veh) for i, veh in enumerate(scn.vehicles)]

    if worst_pair < -tol:
        msgs.append(f"pair margin {worst_pair:.4g} m at {worst_pair_at}")
    if worst_road < -tol:
        msgs.append(f"road margin {worst_road:.4g} m at {worst_road_at}")
    if lim_viol:
        msgs.append(f"{len(lim_viol)} limit violations")
    if term > tol:
        msgs.append(f"terminal pose error {term:.3g}")
    passed = not msgs
    return ValidationReport(
        passed=passed,
        worst_pair_margin=worst_pair,
        worst_road_margin=worst_road,
        worst_pair=worst_pair_at,
        worst_road=worst_road_at,
        limit_violations=lim_viol,
        terminal_pose_error=term,
        max_defect=max_defect,
        completion_times=completion,
        dense_times=times,
        messages=msgs,
    )


def solve_scenario(scn: CrossingScenario, cfg: TranscriptionConfig = TranscriptionConfig(),
                   guess: Optional[Trajectories] = None, dense_factor: int = 10, max_K: int = 160,
                   callback=None):
    """Transcribe, solve and validate, doubling ``K`` while only the dense
    inter-node check fails.

    Returns ``(solution, report)``.
    """
    while True:
        nlp = transcribe(scn, cfg)
        if guess is None:
            g0 = initial_guess(scn, cfg)
        elif guess.K != cfg.K:
            g0 = guess.resampled(cfg.K)
        else:
            g0 = guess
        sol = solve(nlp, g0, callback)
        if sol.status != "optimal":
            return sol, None
        report = validate_solution(sol, scn, dense_factor)
        if report.passed or 2 * cfg.K > max_K:
            return sol, report
        log.info("inter-node check failed at K=%d (%s); refining", cfg.K, "; ".join(report.messages))
        guess = sol.as_guess()
        cfg = replace(cfg, K=2 * cfg.K)
