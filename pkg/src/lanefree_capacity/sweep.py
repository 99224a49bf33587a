"""Sensitivity of crossing time and capacity to speed and acceleration limits."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import Polynomial

from .capacity import SignalRun, capacity_measure, lanefree_capacity, signalized_capacity
from .ocp import TranscriptionConfig, solve_scenario, validate_solution
from .scenario import Intersection, VehicleDefaults, build_scenario, family_movements, with_limits

log = logging.getLogger(__name__)

SIGNAL_REGIMES = ("webster", "max_pressure")
ALL_REGIMES = ("lane_free",) + SIGNAL_REGIMES


def _increasing(vals, name):
    vals = tuple(float(v) for v in vals)
    if not vals:
        raise ValueError(f"{name} is empty")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    if vals[0] <= 0:
        raise ValueError(f"{name} must be positive")
    return vals


@dataclass(frozen=True)
class SweepGrid:
    v_max: tuple = (10.0, 14.0, 18.0, 22.0, 26.0, 30.0)
    a_max: tuple = (2.0, 4.0)
    v_init: tuple = (5.0, 10.0)
    regimes: tuple = ("lane_free",)

    def __post_init__(self):
        for name in ("v_max", "a_max", "v_init"):
            object.__setattr__(self, name, _increasing(getattr(self, name), name))
        object.__setattr__(self, "regimes", tuple(self.regimes))
        for r in self.regimes:
            if r not in ALL_REGIMES:
                raise ValueError(f"unknown regime {r!r}")
        if self.v_init[0] < 0.5:
            raise ValueError("initial speeds must be at least the speed floor")

    def points(self):
        """Grid points ``(v_init, v_max, a_max)`` in table order; points with
        v_init above v_max are skipped."""
        return [(vi, vm, am) for vi in self.v_init for am in self.a_max for vm in self.v_max if vi <= vm]


@dataclass(frozen=True)
class SweepRow:
    regime: str
    v_init: float
    v_max: float
    a_max: float
    N: int
    T: float
    C: float
    C_norm: float = math.nan
    status: str = "ok"
    # "solved", or "inherited" when a neighbour with tighter limits gave the
    # better feasible trajectory.
    source: str = "solved"


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = normalized(self.rows)

    def regime(self, name: str) -> "SweepTable":
        """Sub-table for one regime, re-normalized on its own maximum."""
        return SweepTable([r for r in self.rows if r.regime == name])

    def curve(self, regime: str, v_init: float, a_max: float):
        """``(v_max, T)`` pairs of one series, in grid order, skipping gaps."""
        return [(r.v_max, r.T) for r in self.rows
                if r.regime == regime and r.v_init == v_init and r.a_max == a_max and r.status == "ok"]


def normalized(rows):
    """Rows with ``C_norm = C / max C``; only the first maximal row gets 1.0
    exactly, later ties are nudged just below it."""
    ok = [r.C for r in rows if r.status == "ok" and math.isfinite(r.C)]
    cmax = max(ok) if ok else 0.0
    out, seen_top = [], False
    for r in rows:
        if r.status != "ok" or not cmax > 0:
            out.append(replace(r, C_norm=math.nan))
            continue
        if r.C == cmax and not seen_top:
            v, seen_top = 1.0, True
        else:
            v = min(r.C / cmax, np.nextafter(1.0, 0.0))
        out.append(replace(r, C_norm=float(v)))
    return out


@dataclass(frozen=True)
class SweepBase:
    """What stays fixed across the grid."""

    n_vehicles: int = 3
    intersection: Intersection = Intersection()
    defaults: VehicleDefaults = VehicleDefaults()
    cfg: TranscriptionConfig = TranscriptionConfig()
    signal: SignalRun = SignalRun()
    signal_grid: tuple = tuple(range(1, 49))
    # Run the full N_max search per lane-free point instead of the fixed N.
    full_search: bool = False
    N_budget: int = 6


def _lane_free_family(base: SweepBase, v_init, v_max, a_max):
    defaults = with_limits(base.defaults, V_max=v_max, a_max=a_max, v_init=v_init)
    inter = base.intersection

    def family(n):
        return build_scenario(family_movements(n), inter, defaults)

    return family


def _lane_free_search(base: SweepBase, v_init, v_max, a_max) -> SweepRow:
    try:
        res = lanefree_capacity(_lane_free_family(base, v_init, v_max, a_max), base.cfg, N_budget=base.N_budget)
    except Exception as exc:  # a failed point is a gap row, not an abort
        log.warning("lane-free point (%s, %s, %s) failed: %s", v_init, v_max, a_max, exc)
        return SweepRow("lane_free", v_init, v_max, a_max, 0, math.nan, math.nan, status="error")
    if res.N == 0:
        return SweepRow("lane_free", v_init, v_max, a_max, 0, math.nan, math.nan, status="infeasible")
    return SweepRow("lane_free", v_init, v_max, a_max, res.N, res.T, res.C)


def _lane_free_series(base: SweepBase, v_init, pairs) -> list:
    """Fixed-N rows for one initial speed.

    ``pairs`` are ``(v_max, a_max)`` in an order where every point comes
    after the points with tighter limits. Each solve is warm-started from the
    best solved point it dominates. That neighbour's trajectory stays feasible
    under the looser limits, so when the new solve ends in a worse local
    optimum (or fails) the neighbour's trajectory is re-validated and kept.
    """
    n = base.n_vehicles
    solved = {}  # (v_max, a_max) -> OcpSolution
    rows = []
    for v_max, a_max in pairs:
        scn = _lane_free_family(base, v_init, v_max, a_max)(n)
        dominated = [sol for (vm, am), sol in solved.items() if vm <= v_max and am <= a_max]
        prior = min(dominated, key=lambda s: s.t_f) if dominated else None
        try:
            sol, rep = solve_scenario(scn, base.cfg, guess=prior.as_guess() if prior is not None else None)
        except Exception as exc:  # a failed point is a gap row, not an abort
            log.warning("lane-free point (%s, %s, %s) failed: %s", v_init, v_max, a_max, exc)
            sol, rep = None, None
        ok = sol is not None and sol.status == "optimal" and rep is not None and rep.passed
        source = "solved"
        if prior is not None and (not ok or sol.t_f > prior.t_f):
            prior_rep = validate_solution(prior, scn)
            if prior_rep.passed:
                sol, rep, ok, source = prior, prior_rep, True, "inherited"
        if not ok:
            status = "error" if sol is None else (sol.status if sol.status != "optimal" else "validation_failed")
            rows.append(SweepRow("lane_free", v_init, v_max, a_max, n, math.nan, math.nan, status=status))
            continue
        solved[(v_max, a_max)] = sol
        rows.append(SweepRow("lane_free", v_init, v_max, a_max, n, sol.t_f, capacity_measure(n, sol.t_f),
                             source=source))
    return rows


def _signal_point(base: SweepBase, regime, v_init, v_max, a_max) -> SweepRow:
    run = replace(base.signal, v_init=v_init, hv=replace(base.signal.hv, free_speed=v_max, accel=a_max))
    try:
        res = signalized_capacity(run, regime, base.signal_grid)
    except Exception as exc:
        log.warning("%s point (%s, %s, %s) failed: %s", regime, v_init, v_max, a_max, exc)
        return SweepRow(regime, v_init, v_max, a_max, 0, math.nan, math.nan, status="error")
    if res.N == 0:
        return SweepRow(regime, v_init, v_max, a_max, 0, math.nan, math.nan, status="gridlock")
    return SweepRow(regime, v_init, v_max, a_max, res.N, res.T, res.C)


def _run_task(args) -> list:
    kind, base, regime, payload = args
    if kind == "series":
        v_init, pairs = payload
        return _lane_free_series(base, v_init, pairs)
    v_init, v_max, a_max = payload
    if regime == "lane_free":
        return [_lane_free_search(base, v_init, v_max, a_max)]
    return [_signal_point(base, regime, v_init, v_max, a_max)]


def _row_key(row):
    return row.regime, row.v_init, row.a_max, row.v_max


def run_sweep(grid: SweepGrid, base: SweepBase = SweepBase(), threads: int = 1, progress=None) -> SweepTable:
    """Evaluate every grid point for every regime; rows keep grid order.

    Fixed-N lane-free points are chained along each initial-speed series
    (see ``_lane_free_series``), so the unit of parallel work there is a
    series rather than a point.
    """
    points = grid.points()
    tasks = []
    for reg in grid.regimes:
        if reg == "lane_free" and not base.full_search:
            for vi in grid.v_init:
                pairs = [(vm, am) for (v, vm, am) in points if v == vi]
                if pairs:
                    tasks.append(("series", base, reg, (vi, pairs)))
        else:
            tasks.extend(("point", base, reg, p) for p in points)
    results = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            batches = pool.map(_run_task, tasks)
            for batch in batches:
                for row in batch:
                    results[_row_key(row)] = row
                    if progress:
                        progress(row)
    else:
        for t in tasks:
            for row in _run_task(t):
                results[_row_key(row)] = row
                if progress:
                    progress(row)
    order = [(reg, vi, am, vm) for reg in grid.regimes for (vi, vm, am) in points]
    return SweepTable([results[k] for k in order])


# ---------------------------------------------------------------------------
# Trend fitting


@dataclass(frozen=True)
class QuarticFit:
    # Power-basis coefficients, constant term first.
    coeffs: np.ndarray
    residual: float

    def __call__(self, x):
        return Polynomial(self.coeffs)(x)


def fit_quartic(xs, ys) -> QuarticFit:
    """Least-squares degree-4 polynomial through ``(xs, ys)``.

    The fit is done on a domain mapped to [-1, 1] for conditioning and then
    converted to the power basis; the residual is the 2-norm of the misfit.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if len(np.unique(x)) < 5:
        raise ValueError("a quartic fit needs at least 5 distinct x values")
    p = Polynomial.fit(x, y, 4)
    residual = float(np.linalg.norm(p(x) - y))
    coeffs = np.zeros(5)
    c = p.convert().coef
    coeffs[:len(c)] = c
    return QuarticFit(coeffs=coeffs, residual=residual)


def detect_plateau(curve, rel_tol: float = 0.01):
    """Smallest x from which every successive relative change in y stays
    below ``rel_tol``; ``None`` if the tail never flattens."""
    pts = list(curve)
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    xs = [p[0] for p in pts]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ValueError("curve must be sorted by strictly increasing x")
    ys = [p[1] for p in pts]
    onset = None
    for k in range(len(ys) - 2, -1, -1):
        ref = abs(ys[k])
        change = abs(ys[k + 1] - ys[k]) / ref if ref > 0 else (0.0 if ys[k + 1] == ys[k] else math.inf)
        if change < rel_tol:
            onset = xs[k]
        else:
            break
    return onset
