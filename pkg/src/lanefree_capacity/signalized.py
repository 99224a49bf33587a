"""Microscopic simulation of the same four-legged intersection under signal
control, with Webster fixed-time plans and max-pressure phase selection.

Each approach has a single incoming lane shared by left, through and right
movements. Vehicles move along a 1-D route coordinate ``s`` measured at the
front bumper from the stop line (negative upstream); a route ends once the
rear bumper clears the far edge of the junction box. Discharge across the
stop line is gated so that successive vehicles from one lane are at least
one saturation headway apart.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .scenario import APPROACHES, Intersection, Movement, TURNS, exit_road

log = logging.getLogger(__name__)

MOVEMENTS = tuple((a, t) for a in APPROACHES for t in TURNS)
# A front bumper this far past the stop line counts as crossed.
_CROSS_EPS = 1e-6
_OPPOSITE = {"S": "N", "N": "S", "E": "W", "W": "E"}


class OversaturatedError(ValueError):
    """Critical flow ratios sum to 1 or more; no finite Webster cycle exists."""


def movements_conflict(m1, m2) -> bool:
    """Static conflict table for one-lane approaches with protected lefts."""
    (a1, t1), (a2, t2) = m1, m2
    if a1 == a2:
        return False
    if _OPPOSITE[a1] == a2:
        # Opposing lefts pass each other; a left crosses the opposing flow.
        return (t1 == "left") != (t2 == "left")
    return True


@dataclass(frozen=True)
class SignalPhase:
    id: int
    movements: frozenset

    def __post_init__(self):
        object.__setattr__(self, "movements", frozenset(self.movements))
        for m1, m2 in combinations(sorted(self.movements), 2):
            if movements_conflict(m1, m2):
                raise ValueError(f"phase {self.id}: movements {m1} and {m2} conflict")


DEFAULT_PHASES = (
    SignalPhase(0, {("N", "through"), ("N", "right"), ("S", "through"), ("S", "right")}),
    SignalPhase(1, {("N", "left"), ("S", "left")}),
    SignalPhase(2, {("E", "through"), ("E", "right"), ("W", "through"), ("W", "right")}),
    SignalPhase(3, {("E", "left"), ("W", "left")}),
)


@dataclass(frozen=True)
class SignalPlan:
    cycle: float
    green: tuple
    lost_time: tuple

    def __post_init__(self):
        if abs(self.cycle - sum(self.green) - sum(self.lost_time)) > 1e-9:
            raise ValueError("cycle must equal total green plus total lost time")


@dataclass(frozen=True)
class HvModel:
    reaction_time: float = 1.0
    saturation_headway: float = 1.9
    free_speed: float = 25.0
    accel: float = 3.0
    decel: float = 4.5
    emergency_decel: float = 9.0
    length: float = 4.5
    min_gap: float = 2.0
    # Lateral acceleration bound that caps turning speed.
    turn_lat_accel: float = 4.0

    def __post_init__(self):
        for name in ("reaction_time", "saturation_headway", "free_speed", "accel", "decel", "length", "min_gap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SignalConfig:
    yellow: float = 3.0
    all_red: float = 1.0
    min_green: float = 5.0
    control_period: float = 10.0
    C_min: float = 15.0
    C_max: float = 120.0
    webster_window: float = 300.0
    dt: float = 0.1
    gridlock_timeout: float = 300.0
    max_time: float = 3600.0
    trace_interval: float = 1.0

    @property
    def lost_per_phase(self) -> float:
        return self.yellow + self.all_red


def webster_plan(critical_flow_ratios, lost_time_total: float, clamps=(15.0, 120.0), min_green: float = 5.0,
                 n_lost=None) -> SignalPlan:
    """Webster optimum cycle, clamped, with greens split by flow ratio.

    Phases with zero ratio still receive ``min_green``. When the clamped cycle
    cannot fit every minimum green the cycle is stretched to fit.
    """
    y = np.asarray(critical_flow_ratios, dtype=float)
    if np.any(y < 0):
        raise ValueError("flow ratios must be non-negative")
    Y = float(y.sum())
    if Y >= 1.0:
        raise OversaturatedError(f"sum of critical flow ratios {Y:.3f} >= 1")
    c_min, c_max = clamps
    cycle = min(max((1.5 * lost_time_total + 5.0) / (1.0 - Y), c_min), c_max)
    n = len(y)
    effective = cycle - lost_time_total
    share = y / Y if Y > 0 else np.full(n, 1.0 / n)
    green = share * effective
    # Raise short greens to the minimum and take the difference from the rest.
    fixed = np.zeros(n, dtype=bool)
    for _ in range(n):
        short = (green < min_green) & ~fixed
        if not short.any():
            break
        fixed |= short
        green[fixed] = min_green
        rest = effective - green[fixed].sum()
        free = ~fixed
        if free.any() and share[free].sum() > 0 and rest > 0:
            green[free] = share[free] / share[free].sum() * rest
    green = np.maximum(green, min_green)
    lost = [lost_time_total / n] * n if n_lost is None else list(n_lost)
    return SignalPlan(cycle=float(green.sum() + sum(lost)), green=tuple(float(g) for g in green), lost_time=tuple(lost))


def max_pressure_phase(queues_in: dict, queues_out: dict, phases=DEFAULT_PHASES) -> int:
    """Phase with the largest total (upstream - downstream) queue.

    ``queues_in`` maps a movement ``(approach, turn)`` to its queue and
    ``queues_out`` maps an exit road to its queue. Ties go to the lowest id.
    """
    best_id, best_p = None, -math.inf
    for ph in sorted(phases, key=lambda p: p.id):
        p = 0.0
        for mv in ph.movements:
            p += queues_in.get(mv, 0) - queues_out.get(exit_road(*mv), 0)
        if p > best_p:
            best_id, best_p = ph.id, p
    return best_id


# ---------------------------------------------------------------------------
# Demand


@dataclass(frozen=True)
class Arrival:
    approach: str
    turn: str
    spawn_t: float
    # Front-bumper distance upstream of the stop line at spawn.
    position: float
    speed: float


@dataclass(frozen=True)
class Demand:
    """Hourly flow per approach with turn probabilities."""

    flows: dict
    turn_ratios: dict = field(default_factory=lambda: {"left": 0.25, "through": 0.5, "right": 0.25})
    entry_position: float = 100.0
    entry_speed: float = 10.0

    def arrivals(self, n_vehicles=None, duration=None, seed: int = 0) -> list:
        """Shifted-exponential arrivals with seeded turn draws.

        Each batch contains at least one turning movement. Stops at
        ``n_vehicles`` vehicles or at ``duration`` seconds, whichever comes
        first.
        """
        if n_vehicles is None and duration is None:
            raise ValueError("give n_vehicles or duration")
        rng = np.random.default_rng(seed)
        turns = list(self.turn_ratios)
        probs = np.array([self.turn_ratios[t] for t in turns], dtype=float)
        probs = probs / probs.sum()
        streams = []
        for a in APPROACHES:
            q = float(self.flows.get(a, 0.0))
            if q <= 0:
                continue
            mean = 3600.0 / q
            # Floor the gap at 1 s so arrivals never stack on one point.
            min_h = min(1.0, 0.5 * mean)
            streams.append((a, mean, min_h))
        out = []
        if not streams:
            return out
        t_next = {a: rng.uniform(0, mean) for a, mean, _ in streams}
        horizon = math.inf if duration is None else duration
        while n_vehicles is None or len(out) < n_vehicles:
            a = min(t_next, key=lambda k: (t_next[k], APPROACHES.index(k)))
            t = t_next[a]
            if t > horizon:
                break
            turn = turns[rng.choice(len(turns), p=probs)]
            out.append(Arrival(a, turn, float(t), self.entry_position, self.entry_speed))
            mean, min_h = next((m, h) for s, m, h in streams if s == a)
            t_next[a] = t + min_h + rng.exponential(mean - min_h)
        if out and all(v.turn == "through" for v in out):
            first = out[0]
            out[0] = Arrival(first.approach, "left", first.spawn_t, first.position, first.speed)
        return out


def batch_arrivals(movements, inter: Intersection = Intersection(), hv: "HvModel" = None, v_init: float = 10.0,
                   entry_gap: float = 10.0, queue_gap: float = 2.0, seed: int = 0) -> list:
    """All vehicles present at t=0, queued on their approaches.

    Positions match :func:`lanefree_capacity.scenario.build_scenario` so both
    regimes start from the same layout. A non-zero ``seed`` permutes the turn
    assignments among vehicles (the multiset of turns is kept).
    """
    hv = hv or HvModel()
    movements = list(movements)
    if seed:
        rng = np.random.default_rng(seed)
        turns = [m.turn for m in movements]
        perm = rng.permutation(len(turns))
        movements = [Movement(m.approach, turns[p], m.v_init) for m, p in zip(movements, perm)]
    seen = {a: 0 for a in APPROACHES}
    out = []
    for mv in movements:
        q = seen[mv.approach]
        seen[mv.approach] += 1
        pos = entry_gap + q * (hv.length + queue_gap)
        v0 = v_init if mv.v_init is None else mv.v_init
        out.append(Arrival(mv.approach, mv.turn, 0.0, pos, v0))
    return out


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class VehicleRecord:
    id: int
    approach: str
    turn: str
    spawn_t: float
    enter_t: float = math.nan
    exit_t: float = math.nan
    # Phase showing green (or yellow) when the stop line was crossed.
    enter_phase: Optional[int] = None


@dataclass
class SimResult:
    vehicles: list
    throughput: float
    T_batch: float
    queue_trace: list
    phase_trace: list
    discharge_headways: dict
    min_follow_gap: float
    conservation_ok: bool
    gridlock: bool = False
    end_time: float = 0.0

    @property
    def n_spawned(self) -> int:
        return len(self.vehicles)

    @property
    def n_exited(self) -> int:
        return sum(1 for v in self.vehicles if not math.isnan(v.exit_t))


class _Veh:
    __slots__ = ("rec", "s", "v", "path_len", "v_turn", "release_t", "crossed", "inserted", "lane_idx")

    def __init__(self, rec, s, v, path_len, v_turn):
        self.rec = rec
        self.s = s
        self.v = v
        self.path_len = path_len
        self.v_turn = v_turn
        self.release_t = None
        self.crossed = False
        self.inserted = False


class _WebsterController:
    def __init__(self, phases, cfg: SignalConfig, sat_flow: float):
        self.phases, self.cfg, self.sat_flow = phases, cfg, sat_flow
        self.arrivals = []
        self.schedule = []  # list of (t_start, t_end, phase_id or None, kind)
        self.cycle_end = 0.0
        self.plans = []

    def note_arrival(self, t, movement):
        self.arrivals.append((t, movement))

    def _ratios(self, t):
        lo = t - self.cfg.webster_window
        counts = {}
        for ta, mv in self.arrivals:
            if lo < ta <= t + 1e-9:
                counts[mv] = counts.get(mv, 0) + 1
        ratios = []
        for ph in self.phases:
            per_lane = {}
            for mv in ph.movements:
                per_lane[mv[0]] = per_lane.get(mv[0], 0) + counts.get(mv, 0)
            flow = max(per_lane.values(), default=0) * 3600.0 / self.cfg.webster_window
            ratios.append(flow / self.sat_flow)
        return ratios

    def state(self, t):
        """``(green phase id or None, phase in yellow or None)``."""
        if t >= self.cycle_end - 1e-9:
            self._new_cycle(t)
        for t0, t1, pid, kind in self.schedule:
            if t0 - 1e-9 <= t < t1 - 1e-9:
                return (pid, None) if kind == "green" else (None, pid if kind == "yellow" else None)
        return None, None

    def _new_cycle(self, t):
        cfg = self.cfg
        ratios = self._ratios(t)
        n = len(self.phases)
        lost = cfg.lost_per_phase
        try:
            plan = webster_plan(ratios, lost * n, (cfg.C_min, cfg.C_max), cfg.min_green, [lost] * n)
        except OversaturatedError:
            total = sum(ratios)
            scaled = [0.95 * r / total for r in ratios]
            plan = webster_plan(scaled, lost * n, (cfg.C_min, cfg.C_max), cfg.min_green, [lost] * n)
        self.plans.append((t, plan))
        self.schedule = []
        t0 = t
        for ph, g in zip(self.phases, plan.green):
            self.schedule.append((t0, t0 + g, ph.id, "green"))
            self.schedule.append((t0 + g, t0 + g + cfg.yellow, ph.id, "yellow"))
            self.schedule.append((t0 + g + cfg.yellow, t0 + g + lost, None, "red"))
            t0 += g + lost
        self.cycle_end = t0


class _MaxPressureController:
    def __init__(self, phases, cfg: SignalConfig):
        self.phases, self.cfg = phases, cfg
        # The signal shows the lowest phase when the run starts, as under
        # Webster; the first decision is taken at t=0.
        self.current = min(p.id for p in phases)
        self.green_until = 0.0
        self.transition = None  # (t_yellow_end, t_red_end, old, new)
        self.decisions = []

    def state(self, t, queues_in, queues_out):
        cfg = self.cfg
        if self.transition is not None:
            t_y, t_r, old, new = self.transition
            if t < t_y - 1e-9:
                return None, old
            if t < t_r - 1e-9:
                return None, None
            self.transition = None
            self.current = new
            self.green_until = t + max(cfg.control_period, cfg.min_green)
        if self.current is None or t >= self.green_until - 1e-9:
            choice = max_pressure_phase(queues_in, queues_out, self.phases)
            self.decisions.append((t, choice))
            if self.current is None:
                self.current = choice
                self.green_until = t + max(cfg.control_period, cfg.min_green)
            elif choice == self.current:
                self.green_until = t + cfg.control_period
            else:
                self.transition = (t + cfg.yellow, t + cfg.lost_per_phase, self.current, choice)
                self.current = None
                return None, self.transition[2]
        return self.current, None


def simulate(demand, controller: str = "max_pressure", hv: HvModel = HvModel(), n_vehicles=None,
             duration=None, seed: int = 0, inter: Intersection = Intersection(),
             cfg: SignalConfig = SignalConfig(), phases=DEFAULT_PHASES) -> SimResult:
    """Run the simulation until every vehicle has left (or a stop condition).

    ``demand`` is either a :class:`Demand` or an explicit list of
    :class:`Arrival`. The run is deterministic in its inputs and ``seed``.
    """
    if controller not in ("webster", "max_pressure"):
        raise ValueError(f"unknown controller {controller!r}")
    served = set().union(*(ph.movements for ph in phases))
    if isinstance(demand, Demand):
        arrivals = demand.arrivals(n_vehicles=n_vehicles, duration=duration, seed=seed)
    else:
        arrivals = list(demand)
        if n_vehicles is not None:
            arrivals = arrivals[:n_vehicles]
    for a in arrivals:
        if (a.approach, a.turn) not in served:
            raise ValueError(f"movement {(a.approach, a.turn)} is not served by any phase")
    arrivals = sorted(enumerate(arrivals), key=lambda p: (p[1].spawn_t, p[0]))

    dt = cfg.dt
    sat_h = hv.saturation_headway
    ctrl = (_WebsterController(phases, cfg, 3600.0 / sat_h) if controller == "webster"
            else _MaxPressureController(phases, cfg))
    phase_of = {mv: ph.id for ph in phases for mv in ph.movements}

    lanes = {a: [] for a in APPROACHES}  # vehicles not yet exited, in lane order
    records = []
    pending = list(arrivals)
    last_cross = {a: -math.inf for a in APPROACHES}
    crossings = {mv: [] for mv in MOVEMENTS}
    queue_trace, phase_trace = [], []
    min_gap_seen = math.inf
    conservation_ok = True
    last_progress = 0.0
    gridlock = False
    t = 0.0
    step = 0
    next_trace = 0.0
    exited = 0

    def path_length(a, turn):
        return inter.movement_path_length(a, turn)

    def turn_speed(a, turn):
        if turn == "through":
            return hv.free_speed
        radius = inter.half_box + 0.5 * inter.lane_width if turn == "left" else inter.half_box - 0.5 * inter.lane_width
        return min(hv.free_speed, math.sqrt(hv.turn_lat_accel * radius))

    while True:
        t = step * dt
        # Spawn.
        while pending and pending[0][1].spawn_t <= t + 1e-9:
            idx, arr = pending[0]
            lane = lanes[arr.approach]
            s0 = -arr.position
            if lane:
                tail = lane[-1]
                if tail.s - hv.length - hv.min_gap < s0 - 1e-9:
                    break  # entry blocked; retry next step
            pending.pop(0)
            rec = VehicleRecord(len(records), arr.approach, arr.turn, float(arr.spawn_t))
            records.append(rec)
            veh = _Veh(rec, s0, min(arr.speed, hv.free_speed), path_length(arr.approach, arr.turn),
                       turn_speed(arr.approach, arr.turn))
            lane.append(veh)
            if controller == "webster":
                ctrl.note_arrival(t, (arr.approach, arr.turn))

        # Queues for the controller: servable prefix of each lane per movement.
        q_in = {}
        q_out = {a: 0 for a in APPROACHES}
        for a, lane in lanes.items():
            waiting = [v for v in lane if not v.crossed]
            if waiting:
                head_phase = phase_of[(a, waiting[0].rec.turn)]
                for v in waiting:
                    if phase_of[(a, v.rec.turn)] != head_phase:
                        break
                    mv = (a, v.rec.turn)
                    q_in[mv] = q_in.get(mv, 0) + 1
            for v in lane:
                if v.crossed:
                    q_out[exit_road(a, v.rec.turn)] += 1

        if controller == "webster":
            green, yellow = ctrl.state(t)
        else:
            green, yellow = ctrl.state(t, q_in, q_out)
        phase_trace.append((t, green, yellow))

        if t >= next_trace - 1e-9:
            for mv in MOVEMENTS:
                n_q = sum(1 for v in lanes[mv[0]] if not v.crossed and v.rec.turn == mv[1])
                queue_trace.append((round(t, 6), mv, n_q))
            next_trace += cfg.trace_interval

        moved = False
        for a, lane in lanes.items():
            leader = None
            for v in lane:
                mv = (a, v.rec.turn)
                caps = [hv.free_speed, v.v + hv.accel * dt]
                if v.s < v.path_len:
                    # Slow for the turn before and inside the box.
                    dist_turn = max(0.0, -v.s)
                    caps.append(math.sqrt(v.v_turn**2 + 2 * hv.decel * dist_turn))
                allowed = True
                if not v.crossed:
                    dist = -v.s
                    allowed = green is not None and phase_of[mv] == green
                    if not allowed and yellow is not None and phase_of[mv] == yellow:
                        # Too close to stop comfortably: continue through the yellow.
                        allowed = v.v**2 > 2 * hv.decel * max(dist, 0.0)
                    if not allowed:
                        caps.append(math.sqrt(2 * hv.decel * max(dist, 0.0)))
                        caps.append(max(dist, 0.0) / dt)
                    else:
                        # Arrive at the stop line no earlier than one
                        # saturation headway after the previous crossing.
                        gate = last_cross[a] + sat_h
                        if gate > t + 1e-12:
                            caps.append(max(dist, 0.0) / (gate - t))
                if leader is not None and (not v.crossed or leader.rec.turn == v.rec.turn):
                    gap = leader.s - hv.length - hv.min_gap - v.s
                    caps.append(math.sqrt(max(0.0, leader.v**2 + 2 * hv.decel * max(gap, 0.0))))
                    caps.append(max(gap, 0.0) / dt)
                target = max(0.0, min(caps))
                # Braking is bounded by the emergency deceleration; the hard
                # position clamps below still apply.
                v_new = max(target, v.v - hv.emergency_decel * dt)
                if allowed and not v.crossed:
                    # The headway gate is a hard limit, like the stop line.
                    gate = last_cross[a] + sat_h
                    if gate > t + 1e-12:
                        v_new = min(v_new, max(-v.s, 0.0) / (gate - t))
                stop_line = None
                if not v.crossed and not allowed:
                    stop_line = min(0.0, v.s) if v.s <= 0.0 else None
                # Reaction delay before a stopped vehicle pulls away.
                if v.v < 0.05 and v_new > v.v + 1e-9:
                    if v.release_t is None:
                        v.release_t = t + hv.reaction_time
                    if t < v.release_t - 1e-9:
                        v_new = 0.0
                elif v.v >= 0.05:
                    v.release_t = None
                s_new = v.s + v_new * dt
                if stop_line is not None and s_new > stop_line:
                    s_new, v_new = stop_line, (stop_line - v.s) / dt
                if leader is not None and (not v.crossed or leader.rec.turn == v.rec.turn):
                    limit = leader.s - hv.length - hv.min_gap
                    if s_new > limit:
                        s_new = max(limit, v.s)
                        v_new = (s_new - v.s) / dt
                if s_new > v.s + 1e-9:
                    moved = True
                if not v.crossed and s_new > _CROSS_EPS:
                    v.crossed = True
                    # Interpolated stop-line crossing time.
                    frac = (0.0 - v.s) / (s_new - v.s) if s_new > v.s else 1.0
                    v.rec.enter_t = t + frac * dt
                    v.rec.enter_phase = green if green is not None else yellow
                    last_cross[a] = v.rec.enter_t
                    crossings[mv].append(v.rec.enter_t)
                v.s, v.v = s_new, v_new
                if leader is not None and not v.crossed:
                    min_gap_seen = min(min_gap_seen, leader.s - hv.length - v.s)
                leader = v
            # Exits.
            keep = []
            for v in lane:
                if v.s - hv.length >= v.path_len:
                    frac = 1.0
                    v.rec.exit_t = t + dt * frac
                    exited += 1
                else:
                    keep.append(v)
            lanes[a] = keep

        step += 1
        t_now = step * dt
        in_net = sum(len(l) for l in lanes.values())
        if len(records) != exited + in_net:
            conservation_ok = False
        if moved or not in_net:
            last_progress = t_now
        if not pending and in_net == 0:
            break
        if in_net and t_now - last_progress > cfg.gridlock_timeout:
            gridlock = True
            break
        if t_now >= cfg.max_time or (duration is not None and not isinstance(demand, list) and t_now >= duration + cfg.max_time):
            break

    exits = [r.exit_t for r in records if not math.isnan(r.exit_t)]
    T = (max(exits) - min(r.spawn_t for r in records)) if exits and len(exits) == len(records) else math.nan
    if records and not math.isnan(T) and T > 0:
        throughput = 3600.0 * len(records) / T
    else:
        throughput = 0.0
    headways = {mv: list(np.diff(ts)) for mv, ts in crossings.items() if len(ts) > 1}
    return SimResult(
        vehicles=records,
        throughput=throughput,
        T_batch=T if records else 0.0,
        queue_trace=queue_trace,
        phase_trace=phase_trace,
        discharge_headways=headways,
        min_follow_gap=min_gap_seen,
        conservation_ok=conservation_ok,
        gridlock=gridlock,
        end_time=t_now,
    )
