"""JSON scenario files.

A file is a single object with a ``schema_version`` and optional sections;
missing sections take the defaults below and unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .capacity import SignalRun
from .dynamics import Limits, PhysicalParams
from .geometry import VehicleShape
from .ocp import CrossingScenario, TranscriptionConfig
from .scenario import APPROACHES, TURNS, Intersection, Movement, VehicleDefaults, build_scenario, family_movements
from .signalized import Demand, HvModel, SignalConfig
from .sweep import SweepGrid

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message, line=None, col=None):
        self.line, self.col = line, col
        where = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(message + where)


def _take(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return obj


def _num(obj, key, default, where):
    v = obj.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number")
    return float(v)


def _int(obj, key, default, where):
    v = obj.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}.{key}: expected an integer")
    return v


def _num_list(obj, key, default, where):
    v = obj.get(key, default)
    if not isinstance(v, (list, tuple)) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"{where}.{key}: expected a list of numbers")
    return tuple(float(x) for x in v)


@dataclass(frozen=True)
class ScenarioConfig:
    intersection: Intersection = Intersection()
    defaults: VehicleDefaults = VehicleDefaults()
    # Explicit vehicle list; ``None`` means the round-robin family of ``n_vehicles``.
    vehicles: Optional[tuple] = None
    n_vehicles: int = 3
    d_min: float = 0.1
    d_rmin: float = 0.1
    controller: str = "max_pressure"
    demand: Optional[Demand] = None
    seed: int = 0
    duration: Optional[float] = None
    hv: HvModel = HvModel()
    signal: SignalConfig = SignalConfig()
    solver: TranscriptionConfig = TranscriptionConfig()
    dense_factor: int = 10
    N_start: int = 1
    N_max_budget: int = 6
    signal_N_grid: tuple = (1, 48)
    sweep: SweepGrid = field(default_factory=SweepGrid)

    def movements(self, n: Optional[int] = None) -> list:
        if self.vehicles is not None:
            mv = list(self.vehicles)
            return mv if n is None else mv[:n]
        return family_movements(self.n_vehicles if n is None else n)

    def crossing_scenario(self, n: Optional[int] = None) -> CrossingScenario:
        return build_scenario(self.movements(n), self.intersection, self.defaults, self.d_min, self.d_rmin)

    def family(self):
        """``N -> CrossingScenario`` used by the capacity search."""
        def make(n):
            return build_scenario(self.movements_for(n), self.intersection, self.defaults, self.d_min, self.d_rmin)
        return make

    def movements_for(self, n: int) -> list:
        # Explicit vehicles come first; the family fills any further slots.
        if self.vehicles is None:
            return family_movements(n)
        mv = list(self.vehicles[:n])
        return mv + family_movements(n)[len(mv):]

    def signal_run(self) -> SignalRun:
        return SignalRun(movements_for=self.movements_for, hv=self.hv, sig=self.signal, v_init=self.defaults.v_init, entry_gap=self.defaults.entry_gap,
                         queue_gap=self.defaults.queue_gap, seed=self.seed)

    def N_grid(self):
        lo, hi = self.signal_N_grid
        return range(int(lo), int(hi) + 1)


# ---------------------------------------------------------------------------
# dict <-> config


def to_dict(cfg: ScenarioConfig) -> dict:
    d = cfg.defaults
    out = {
        "schema_version": SCHEMA_VERSION,
        "intersection": {
            "lane_length_m": cfg.intersection.lane_length,
            "lane_width_m": cfg.intersection.lane_width,
            "lanes_per_approach": cfg.intersection.lanes_per_approach,
        },
        "defaults": {
            "shape": {"length_m": d.shape.length, "width_m": d.shape.width},
            "physical": {k: getattr(d.physical, k) for k in ("m", "I_z", "C_f", "C_r", "l_f", "l_r")},
            "limits": {k: getattr(d.limits, k) for k in ("V_min", "V_max", "a_max", "delta_max", "r_max", "beta_max")},
            "v_init": d.v_init,
            "queue_gap_m": d.queue_gap,
            "entry_gap_m": d.entry_gap,
            "exit_gap_m": d.exit_gap,
        },
        "vehicles": None if cfg.vehicles is None else [
            {"approach": m.approach, "turn": m.turn, "v_init": m.v_init} for m in cfg.vehicles
        ],
        "n_vehicles": cfg.n_vehicles,
        "safety": {"d_min_m": cfg.d_min, "d_rmin_m": cfg.d_rmin},
        "signal": {
            "controller": cfg.controller,
            "demand": None if cfg.demand is None else {
                "flows_veh_h": dict(cfg.demand.flows),
                "turn_ratios": dict(cfg.demand.turn_ratios),
            },
            "seed": cfg.seed,
            "duration_s": cfg.duration,
            "hv": {k: getattr(cfg.hv, k) for k in _HV_KEYS},
            "timing": {k: getattr(cfg.signal, k) for k in _TIMING_KEYS},
        },
        "solver": {
            "K": cfg.solver.K,
            "tol": cfg.solver.tol,
            "feas_tol": cfg.solver.feas_tol,
            "max_iter": cfg.solver.max_iter,
            "dense_factor": cfg.dense_factor,
        },
        "capacity": {
            "N_start": cfg.N_start,
            "N_max_budget": cfg.N_max_budget,
            "signal_N_grid": list(cfg.signal_N_grid),
        },
        "sweep": {
            "v_max": list(cfg.sweep.v_max),
            "a_max": list(cfg.sweep.a_max),
            "v_init": list(cfg.sweep.v_init),
        },
    }
    return out


_HV_KEYS = ("reaction_time", "saturation_headway", "free_speed", "accel", "decel", "emergency_decel", "length",
            "min_gap", "turn_lat_accel")
_TIMING_KEYS = ("yellow", "all_red", "min_green", "control_period", "C_min", "C_max", "webster_window")
_TOP_KEYS = ("schema_version", "intersection", "defaults", "vehicles", "n_vehicles", "safety", "signal", "solver",
             "capacity", "sweep")


def from_dict(raw: dict) -> ScenarioConfig:
    _take(raw, _TOP_KEYS, "scenario")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    base = ScenarioConfig()
    try:
        sec = _take(raw.get("intersection", {}), ("lane_length_m", "lane_width_m", "lanes_per_approach"), "intersection")
        inter = Intersection(
            _num(sec, "lane_length_m", base.intersection.lane_length, "intersection"),
            _num(sec, "lane_width_m", base.intersection.lane_width, "intersection"),
            _int(sec, "lanes_per_approach", base.intersection.lanes_per_approach, "intersection"),
        )
        if inter.lane_length <= 0 or inter.lane_width <= 0 or inter.lanes_per_approach < 1:
            raise ConfigError("intersection: dimensions must be positive")

        bd = base.defaults
        sec = _take(raw.get("defaults", {}), ("shape", "physical", "limits", "v_init", "queue_gap_m", "entry_gap_m",
                                              "exit_gap_m"), "defaults")
        sh = _take(sec.get("shape", {}), ("length_m", "width_m"), "defaults.shape")
        shape = VehicleShape(_num(sh, "length_m", bd.shape.length, "defaults.shape"),
                             _num(sh, "width_m", bd.shape.width, "defaults.shape"))
        ph_keys = ("m", "I_z", "C_f", "C_r", "l_f", "l_r")
        ph = _take(sec.get("physical", {}), ph_keys, "defaults.physical")
        physical = PhysicalParams(**{k: _num(ph, k, getattr(bd.physical, k), "defaults.physical") for k in ph_keys})
        lim_keys = ("V_min", "V_max", "a_max", "delta_max", "r_max", "beta_max")
        lm = _take(sec.get("limits", {}), lim_keys, "defaults.limits")
        limits = Limits(**{k: _num(lm, k, getattr(bd.limits, k), "defaults.limits") for k in lim_keys})
        defaults = VehicleDefaults(
            shape=shape, physical=physical, limits=limits,
            v_init=_num(sec, "v_init", bd.v_init, "defaults"),
            queue_gap=_num(sec, "queue_gap_m", bd.queue_gap, "defaults"),
            entry_gap=_num(sec, "entry_gap_m", bd.entry_gap, "defaults"),
            exit_gap=_num(sec, "exit_gap_m", bd.exit_gap, "defaults"),
        )

        vehicles = None
        if raw.get("vehicles") is not None:
            if not isinstance(raw["vehicles"], list) or not raw["vehicles"]:
                raise ConfigError("vehicles: expected a non-empty list")
            vehicles = []
            for k, v in enumerate(raw["vehicles"]):
                v = _take(v, ("approach", "turn", "v_init"), f"vehicles[{k}]")
                if v.get("approach") not in APPROACHES:
                    raise ConfigError(f"vehicles[{k}].approach: one of {', '.join(APPROACHES)}")
                if v.get("turn") not in TURNS:
                    raise ConfigError(f"vehicles[{k}].turn: one of {', '.join(TURNS)}")
                vehicles.append(Movement(v["approach"], v["turn"], _num(v, "v_init", None, f"vehicles[{k}]")))
            vehicles = tuple(vehicles)
        n_vehicles = _int(raw, "n_vehicles", len(vehicles) if vehicles else base.n_vehicles, "scenario")
        if n_vehicles < 1:
            raise ConfigError("n_vehicles must be at least 1")

        sec = _take(raw.get("safety", {}), ("d_min_m", "d_rmin_m"), "safety")
        d_min = _num(sec, "d_min_m", base.d_min, "safety")
        d_rmin = _num(sec, "d_rmin_m", base.d_rmin, "safety")
        if d_min < 0 or d_rmin < 0:
            raise ConfigError("safety margins must be non-negative")

        sec = _take(raw.get("signal", {}), ("controller", "demand", "seed", "duration_s", "hv", "timing"), "signal")
        controller = sec.get("controller", base.controller)
        if controller not in ("webster", "max_pressure"):
            raise ConfigError("signal.controller: webster or max_pressure")
        demand = None
        if sec.get("demand") is not None:
            dm = _take(sec["demand"], ("flows_veh_h", "turn_ratios"), "signal.demand")
            flows = _take(dm.get("flows_veh_h", {}), APPROACHES, "signal.demand.flows_veh_h")
            flows = {a: _num(flows, a, 0.0, "signal.demand.flows_veh_h") for a in APPROACHES if a in flows}
            if any(q < 0 for q in flows.values()):
                raise ConfigError("signal.demand.flows_veh_h: flows must be non-negative")
            kw = {}
            if "turn_ratios" in dm:
                tr = _take(dm["turn_ratios"], TURNS, "signal.demand.turn_ratios")
                kw["turn_ratios"] = {t: _num(tr, t, 0.0, "signal.demand.turn_ratios") for t in TURNS if t in tr}
            demand = Demand(flows, **kw)
        seed = _int(sec, "seed", base.seed, "signal")
        duration = _num(sec, "duration_s", None, "signal")
        hv_raw = _take(sec.get("hv", {}), _HV_KEYS, "signal.hv")
        hv = HvModel(**{k: _num(hv_raw, k, getattr(base.hv, k), "signal.hv") for k in _HV_KEYS})
        tm = _take(sec.get("timing", {}), _TIMING_KEYS, "signal.timing")
        timing = SignalConfig(**{k: _num(tm, k, getattr(base.signal, k), "signal.timing") for k in _TIMING_KEYS})

        sec = _take(raw.get("solver", {}), ("K", "tol", "feas_tol", "max_iter", "dense_factor"), "solver")
        solver = TranscriptionConfig(
            K=_int(sec, "K", base.solver.K, "solver"),
            tol=_num(sec, "tol", base.solver.tol, "solver"),
            feas_tol=_num(sec, "feas_tol", base.solver.feas_tol, "solver"),
            max_iter=_int(sec, "max_iter", base.solver.max_iter, "solver"),
        )
        dense_factor = _int(sec, "dense_factor", base.dense_factor, "solver")

        sec = _take(raw.get("capacity", {}), ("N_start", "N_max_budget", "signal_N_grid"), "capacity")
        N_start = _int(sec, "N_start", base.N_start, "capacity")
        N_budget = _int(sec, "N_max_budget", base.N_max_budget, "capacity")
        grid = _num_list(sec, "signal_N_grid", base.signal_N_grid, "capacity")
        if len(grid) != 2 or not 1 <= grid[0] <= grid[1] or any(g != int(g) for g in grid):
            raise ConfigError("capacity.signal_N_grid: [first, last] positive integers")
        if not 1 <= N_start <= N_budget:
            raise ConfigError("capacity: need 1 <= N_start <= N_max_budget")

        sec = _take(raw.get("sweep", {}), ("v_max", "a_max", "v_init"), "sweep")
        sweep = SweepGrid(
            v_max=_num_list(sec, "v_max", base.sweep.v_max, "sweep"),
            a_max=_num_list(sec, "a_max", base.sweep.a_max, "sweep"),
            v_init=_num_list(sec, "v_init", base.sweep.v_init, "sweep"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    return ScenarioConfig(
        intersection=inter, defaults=defaults, vehicles=vehicles, n_vehicles=n_vehicles, d_min=d_min, d_rmin=d_rmin,
        controller=controller, demand=demand, seed=seed, duration=duration, hv=hv, signal=timing, solver=solver,
        dense_factor=dense_factor, N_start=N_start, N_max_budget=N_budget, signal_N_grid=(int(grid[0]), int(grid[1])),
        sweep=sweep,
    )


def loads(text: str) -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    return from_dict(raw)


def load(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: ScenarioConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"


def template() -> ScenarioConfig:
    """Starting point written by ``init``: the three-vehicle family made explicit."""
    return ScenarioConfig(vehicles=tuple(family_movements(3)), n_vehicles=3)
