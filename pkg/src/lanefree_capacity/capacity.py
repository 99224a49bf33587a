"""Capacity measures and the two capacity procedures.

Both regimes report ``C = 3600 N / T`` where ``T`` runs from the moment the
first vehicle starts until the last one has fully left the junction.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .ocp import (
    CrossingScenario,
    OcpSolution,
    ScenarioError,
    TranscriptionConfig,
    ValidationReport,
    padded_guess,
    solve_scenario,
)
from .scenario import family_movements
from .signalized import HvModel, SignalConfig, batch_arrivals, simulate

log = logging.getLogger(__name__)

REGIMES = ("lane_free", "webster", "max_pressure")
TERMINAL_REASONS = ("infeasible_at_N+1", "throughput_declined", "budget")
DECLINE_TOL = 0.02
DECLINE_POINTS = 2


def capacity_measure(N: float, T: float) -> float:
    """Vehicles per hour for ``N`` vehicles crossing in ``T`` seconds."""
    if N < 0:
        raise ValueError("N must be non-negative")
    if not T > 0:
        raise ValueError("T must be positive")
    return 3600.0 * N / T


def degree_of_utilization(v: float, h_d: float) -> float:
    """Fraction of capacity in use at flow ``v`` (veh/h) and departure headway ``h_d`` (s)."""
    if v < 0:
        raise ValueError("flow must be non-negative")
    if not h_d > 0:
        raise ValueError("headway must be positive")
    return v * h_d / 3600.0


@dataclass(frozen=True)
class CurvePoint:
    N: int
    T: float
    throughput: float
    status: str = "ok"


@dataclass
class CapacityResult:
    regime: str
    N: int
    T: float
    C: float
    curve: list = field(default_factory=list)
    terminal_reason: str = "budget"
    # Lane-free extras.
    solution: Optional[OcpSolution] = None
    report: Optional[ValidationReport] = None
    t_f_spread: float = math.nan
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.terminal_reason not in TERMINAL_REASONS:
            raise ValueError(f"unknown terminal reason {self.terminal_reason!r}")
        if self.N > 0 and abs(self.C - capacity_measure(self.N, self.T)) > 1e-9 * max(1.0, self.C):
            raise ValueError("C must equal 3600 N / T")


def improvement_ratio(c_lane_free: float, c_signalized: float) -> float:
    """Relative gain ``C_lf / C_sig - 1``."""
    if not c_signalized > 0:
        raise ValueError("signalised capacity must be positive")
    return c_lane_free / c_signalized - 1.0


# ---------------------------------------------------------------------------
# Lane-free


def _solve_with_retry(scn, cfg, guess, dense_factor, max_K):
    sol, rep = solve_scenario(scn, cfg, guess=guess, dense_factor=dense_factor, max_K=max_K)
    if sol.status == "max_iter":
        log.info("N=%d hit the iteration cap at K=%d; retrying with K=%d", scn.n_vehicles, cfg.K, 2 * cfg.K)
        cfg2 = replace(cfg, K=2 * cfg.K)
        sol, rep = solve_scenario(scn, cfg2, guess=None, dense_factor=dense_factor, max_K=max(max_K, cfg2.K))
        return sol, rep, True
    return sol, rep, False


def lanefree_capacity(scenario_family: Callable[[int], CrossingScenario], cfg: TranscriptionConfig = TranscriptionConfig(),
                      N_start: int = 1, N_budget: int = 6, dense_factor: int = 10, max_K: int = 160,
                      warm_start: bool = True, progress: Optional[Callable] = None) -> CapacityResult:
    """Largest N whose crossing problem solves and validates, with its time.

    N grows from ``N_start``; the first N that is infeasible (or fails the
    dense check) ends the search. Each solve is warm-started from the
    previous N's solution with the new vehicle appended, falling back to a
    cold start when the warm-started solve fails.
    """
    if N_start < 1 or N_budget < N_start:
        raise ValueError("need 1 <= N_start <= N_budget")
    curve, notes = [], []
    best = None  # (N, sol, report, T)
    prev = None
    reason = "budget"
    for n in range(N_start, N_budget + 1):
        try:
            scn = scenario_family(n)
            scn.check()
        except ScenarioError as exc:
            notes.append(f"N={n}: {exc}")
            curve.append(CurvePoint(n, math.nan, 0.0, "infeasible"))
            reason = "infeasible_at_N+1"
            break
        guess = padded_guess(scn, cfg, prev) if (warm_start and prev is not None) else None
        sol, rep, retried = _solve_with_retry(scn, cfg, guess, dense_factor, max_K)
        if retried:
            notes.append(f"N={n}: iteration cap reached, retried with doubled K -> {sol.status}")
        passed = sol.status == "optimal" and rep is not None and rep.passed
        if not passed and guess is not None:
            # A warm start can land in a poor basin; a cold start sometimes
            # does not.
            notes.append(f"N={n}: warm start gave {sol.status}, retrying from the default guess")
            sol, rep, retried = _solve_with_retry(scn, cfg, None, dense_factor, max_K)
            passed = sol.status == "optimal" and rep is not None and rep.passed
        if progress is not None:
            progress(n, sol, rep)
        if not passed:
            status = sol.status if sol.status != "optimal" else "validation_failed"
            curve.append(CurvePoint(n, sol.t_f, 0.0, status))
            notes.append(f"N={n}: {status} ({sol.solver_status})")
            reason = "infeasible_at_N+1"
            break
        T = sol.t_f
        curve.append(CurvePoint(n, T, capacity_measure(n, T)))
        best = (n, sol, rep, T)
        prev = sol.as_guess()
    if best is None:
        return CapacityResult("lane_free", 0, math.nan, 0.0, curve, reason, notes=notes)
    n, sol, rep, T = best
    tfs = [p.T for p in curve if p.status == "ok"]
    spread = (max(tfs) - min(tfs)) if tfs else math.nan
    return CapacityResult("lane_free", n, T, capacity_measure(n, T), curve, reason, solution=sol, report=rep,
                          t_f_spread=spread, notes=notes)


# ---------------------------------------------------------------------------
# Signalised


@dataclass(frozen=True)
class SignalRun:
    """Inputs of one signalised capacity search."""

    movements_for: Callable = family_movements
    hv: HvModel = HvModel()
    sig: SignalConfig = SignalConfig()
    v_init: float = 10.0
    entry_gap: float = 10.0
    queue_gap: float = 2.0
    seed: int = 0


def _batch_point(args):
    run, controller, n = args
    arrivals = batch_arrivals(run.movements_for(n), hv=run.hv, v_init=run.v_init, entry_gap=run.entry_gap,
                              queue_gap=run.queue_gap, seed=run.seed)
    res = simulate(arrivals, controller, hv=run.hv, cfg=run.sig)
    if res.gridlock or not res.T_batch > 0:
        return CurvePoint(n, math.nan, 0.0, "gridlock")
    return CurvePoint(n, res.T_batch, capacity_measure(n, res.T_batch))


def peak_of(curve, tol: float = DECLINE_TOL, points: int = DECLINE_POINTS):
    """Index of the highest throughput (first on ties) and whether a decline
    of more than ``tol`` is confirmed by ``points`` consecutive later points."""
    thr = np.array([p.throughput if p.status == "ok" else -math.inf for p in curve])
    if not len(thr) or not np.isfinite(thr).any():
        return None, False
    k = int(np.argmax(thr))
    run = 0
    for q in thr[k + 1:]:
        run = run + 1 if q < (1.0 - tol) * thr[k] else 0
        if run >= points:
            return k, True
    return k, False


def signalized_capacity(run: SignalRun, controller: str, N_grid, threads: int = 1) -> CapacityResult:
    """Throughput peak over ``N_grid`` for one controller.

    Every grid point is simulated (points are independent and may run in
    parallel); gridlocked points count as beyond capacity.
    """
    grid = list(N_grid)
    if any(b <= a for a, b in zip(grid, grid[1:])) or not grid or grid[0] < 1:
        raise ValueError("N_grid must be positive and strictly increasing")
    tasks = [(run, controller, n) for n in grid]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            curve = list(pool.map(_batch_point, tasks))
    else:
        curve = [_batch_point(t) for t in tasks]
    k, declined = peak_of(curve)
    if k is None:
        return CapacityResult(controller, 0, math.nan, 0.0, curve, "budget")
    p = curve[k]
    return CapacityResult(controller, p.N, p.T, p.throughput, curve, "throughput_declined" if declined else "budget")
