import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefree_capacity import capacity as cap
from lanefree_capacity.capacity import (
    CapacityResult,
    CurvePoint,
    SignalRun,
    capacity_measure,
    degree_of_utilization,
    improvement_ratio,
    lanefree_capacity,
    peak_of,
    signalized_capacity,
)
from lanefree_capacity.dynamics import Limits, PhysicalParams, stability_derivatives
from lanefree_capacity.geometry import Pose, VehicleShape
from lanefree_capacity.ocp import CrossingScenario, OcpSolution, TranscriptionConfig, VehicleSpec, validate_solution
from lanefree_capacity.scenario import family_movements
from lanefree_capacity.signalized import batch_arrivals, simulate


def test_capacity_measure_reference_points():
    assert capacity_measure(21, 3600 * 21 / 16543) == pytest.approx(16543, abs=0.5)
    assert capacity_measure(21, 3600 * 21 / 2726) == pytest.approx(2726, abs=0.5)
    assert capacity_measure(0, 5.0) == 0.0
    with pytest.raises(ValueError):
        capacity_measure(3, 0.0)
    with pytest.raises(ValueError):
        capacity_measure(-1, 3.0)


@given(st.integers(0, 500), st.floats(0.1, 1e4), st.floats(0.01, 100))
def test_capacity_measure_homogeneous(N, T, k):
    assert capacity_measure(k * N, k * T) == pytest.approx(capacity_measure(N, T), rel=1e-12)


def test_degree_of_utilization():
    assert degree_of_utilization(1800, 2.0) == pytest.approx(1.0)
    assert degree_of_utilization(0, 2.0) == 0.0
    with pytest.raises(ValueError):
        degree_of_utilization(100, 0.0)


def test_improvement_ratio():
    assert improvement_ratio(16543, 2726) == pytest.approx(5.0686, abs=1e-4)
    with pytest.raises(ValueError):
        improvement_ratio(1.0, 0.0)


def test_capacity_result_checks_consistency():
    CapacityResult("webster", 3, 9.0, 1200.0)
    with pytest.raises(ValueError):
        CapacityResult("webster", 3, 9.0, 1000.0)
    with pytest.raises(ValueError):
        CapacityResult("fixed_time", 3, 9.0, 1200.0)


class _Report:
    passed = True


def _fake_solver(t_of_n, infeasible_from):
    def solve(scn, cfg, guess=None, dense_factor=10, max_K=160):
        n = scn.n_vehicles
        if n >= infeasible_from:
            return OcpSolution("infeasible", math.nan, [], [], {}, math.nan, cfg.K), None
        return OcpSolution("optimal", t_of_n(n), [], [], {}, t_of_n(n), cfg.K), _Report()

    return solve


def _stub_family(n):
    return CrossingScenario(tuple(range(n)))


@pytest.fixture
def stubbed(monkeypatch):
    monkeypatch.setattr(CrossingScenario, "check", lambda self: None)
    monkeypatch.setattr(cap, "padded_guess", lambda scn, cfg, prev: None)
    return monkeypatch


def test_lanefree_stops_at_first_infeasible(stubbed):
    stubbed.setattr(cap, "solve_scenario", _fake_solver(lambda n: 3.0 * n, 4))
    res = lanefree_capacity(_stub_family, N_budget=6)
    assert (res.N, res.T, res.C) == (3, 9.0, 1200.0)
    assert res.terminal_reason == "infeasible_at_N+1"
    assert [p.status for p in res.curve] == ["ok", "ok", "ok", "infeasible"]
    assert res.t_f_spread == pytest.approx(6.0)


def test_lanefree_budget_exhausted(stubbed):
    stubbed.setattr(cap, "solve_scenario", _fake_solver(lambda n: 2.0 + 0.1 * n, 99))
    res = lanefree_capacity(_stub_family, N_budget=4)
    assert res.N == 4 and res.terminal_reason == "budget"
    assert res.C == pytest.approx(3600 * 4 / 2.4)


def test_lanefree_retries_cold_after_failed_warm_start(stubbed):
    calls = []

    def solve(scn, cfg, guess=None, dense_factor=10, max_K=160):
        calls.append((scn.n_vehicles, guess is None))
        if scn.n_vehicles == 2 and calls[-1] == (2, False):
            # A failed warm start would end the search at N=1.
            return OcpSolution("infeasible", math.nan, [], [], {}, math.nan, cfg.K), None
        return OcpSolution("optimal", 3.0, [], [], {}, 3.0, cfg.K), _Report()

    stubbed.setattr(cap, "padded_guess", lambda scn, cfg, prev: "warm")
    stubbed.setattr(cap, "solve_scenario", solve)
    res = lanefree_capacity(_stub_family, N_budget=2)
    assert res.N == 2
    assert calls == [(1, True), (2, False), (2, True)]


def test_lanefree_rejects_bad_budget():
    with pytest.raises(ValueError):
        lanefree_capacity(_stub_family, N_start=3, N_budget=2)


def test_lanefree_single_straight_vehicle():
    p = stability_derivatives(PhysicalParams(), 10.0)
    v = VehicleSpec(VehicleShape(), p, Limits(), Pose(0, 0, 0), 10.0, Pose(100, 0, 0))
    res = lanefree_capacity(lambda n: CrossingScenario((v,) * n), TranscriptionConfig(K=40), N_budget=1)
    assert res.N == 1 and res.terminal_reason == "budget"
    assert res.C == pytest.approx(3600 / 5.5, rel=0.03)
    # The returned solution re-passes the validator.
    assert validate_solution(res.solution, CrossingScenario((v,))).passed


def _curve(values):
    return [CurvePoint(n + 1, 3600.0 * (n + 1) / v if v > 0 else math.nan, v) for n, v in enumerate(values)]


def test_peak_rules():
    k, declined = peak_of(_curve([100, 200, 300, 290, 280]))
    assert (k, declined) == (2, True)
    # A single dip is not a confirmed decline.
    assert peak_of(_curve([100, 300, 280, 299, 250])) == (1, False)
    # Ties go to the first (lowest N) point.
    assert peak_of(_curve([200, 200, 200])) == (0, False)
    # A later global maximum wins over an early local one.
    assert peak_of(_curve([300, 250, 240, 310]))[0] == 3
    assert peak_of([]) == (None, False)


@given(st.lists(st.floats(1.0, 5000.0), min_size=1, max_size=30))
def test_peak_dominates_curve(values):
    k, _ = peak_of(_curve(values))
    assert all(values[k] >= v for v in values)
    assert values.index(max(values)) == k


@pytest.fixture(scope="module")
def signal_results():
    grid = range(1, 25)
    return {c: signalized_capacity(SignalRun(), c, grid) for c in ("webster", "max_pressure")}


def test_signalized_capacity_is_curve_peak(signal_results):
    for res in signal_results.values():
        ok = [p.throughput for p in res.curve if p.status == "ok"]
        assert res.C == max(ok)
        assert res.C == pytest.approx(capacity_measure(res.N, res.T))
        assert res.C < 4 * 3600 / 1.9


def test_signalized_batch_time_spans_first_start_to_last_exit():
    res = simulate(batch_arrivals(family_movements(6)), "max_pressure")
    first = min(v.spawn_t for v in res.vehicles)
    last = max(v.exit_t for v in res.vehicles)
    assert res.T_batch == pytest.approx(last - first)


def test_signalized_capacity_grid_validation():
    with pytest.raises(ValueError):
        signalized_capacity(SignalRun(), "webster", [3, 2])
    with pytest.raises(ValueError):
        signalized_capacity(SignalRun(), "webster", [])


def test_signalized_capacity_parallel_matches_serial():
    a = signalized_capacity(SignalRun(), "webster", range(1, 7))
    b = signalized_capacity(SignalRun(), "webster", range(1, 7), threads=2)
    assert a.curve == b.curve
    assert np.isfinite(a.C)
