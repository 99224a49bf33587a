import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefree_capacity.scenario import Intersection, Movement, exit_road, family_movements
from lanefree_capacity.signalized import (
    DEFAULT_PHASES,
    Arrival,
    Demand,
    HvModel,
    OversaturatedError,
    SignalPhase,
    SignalPlan,
    batch_arrivals,
    max_pressure_phase,
    movements_conflict,
    simulate,
    webster_plan,
)

HV = HvModel()


def test_webster_cycle_reference_value():
    # (1.5 * 10 + 5) / (1 - 0.675) = 61.538...
    plan = webster_plan([0.3, 0.2, 0.1, 0.075], 10.0, clamps=(0.0, 1e9), min_green=0.0)
    assert plan.cycle == pytest.approx(20.0 / 0.325)
    assert sum(plan.green) + sum(plan.lost_time) == pytest.approx(plan.cycle)
    g = np.array(plan.green)
    assert np.allclose(g / g.sum(), np.array([0.3, 0.2, 0.1, 0.075]) / 0.675)


def test_webster_low_demand_hits_lower_clamp():
    plan = webster_plan([1e-9] * 4, 4.0, clamps=(30.0, 120.0))
    assert plan.cycle == pytest.approx(30.0)


def test_webster_equal_ratios_equal_greens():
    plan = webster_plan([0.1] * 4, 16.0)
    assert np.allclose(plan.green, plan.green[0])
    assert min(plan.green) >= 5.0


def test_webster_oversaturated():
    with pytest.raises(OversaturatedError):
        webster_plan([0.5, 0.5], 8.0)


@given(st.lists(st.floats(0.0, 0.24), min_size=4, max_size=4))
def test_webster_plan_invariants(ratios):
    plan = webster_plan(ratios, 16.0, min_green=5.0)
    assert plan.cycle == pytest.approx(sum(plan.green) + sum(plan.lost_time))
    assert min(plan.green) >= 5.0 - 1e-9


def test_signal_plan_invariant():
    with pytest.raises(ValueError):
        SignalPlan(cycle=40.0, green=(10.0, 10.0), lost_time=(4.0, 4.0))


def test_phase_conflicts():
    assert not movements_conflict(("N", "through"), ("S", "through"))
    assert movements_conflict(("N", "left"), ("S", "through"))
    assert not movements_conflict(("N", "left"), ("S", "left"))
    assert movements_conflict(("N", "through"), ("E", "through"))
    with pytest.raises(ValueError):
        SignalPhase(9, {("N", "through"), ("E", "right")})
    served = set().union(*(p.movements for p in DEFAULT_PHASES))
    assert len(served) == 12


def test_max_pressure_examples():
    assert max_pressure_phase({}, {}) == 0
    assert max_pressure_phase({("E", "left"): 5}, {}) == 3
    # Downstream queues push pressure down.
    q_in = {("N", "left"): 3, ("E", "left"): 2}
    assert max_pressure_phase(q_in, {}) == 1
    assert max_pressure_phase(q_in, {exit_road("N", "left"): 2}) == 3


@given(st.dictionaries(st.sampled_from([(a, t) for a in "SWNE" for t in ("left", "through", "right")]),
                       st.integers(0, 20)),
       st.dictionaries(st.sampled_from("SWNE"), st.integers(0, 20)),
       st.integers(1, 50))
def test_max_pressure_scale_invariant(q_in, q_out, k):
    a = max_pressure_phase(q_in, q_out)
    b = max_pressure_phase({m: k * v for m, v in q_in.items()}, {m: k * v for m, v in q_out.items()})
    assert a == b


def test_zero_demand():
    res = simulate([], "max_pressure")
    assert res.n_spawned == 0 and res.throughput == 0.0
    res = simulate(Demand({}), "webster", duration=60.0)
    assert res.n_spawned == 0 and res.throughput == 0.0


def test_single_vehicle_free_flow():
    # Phase 0 (north-south through) is green from the start.
    arr = [Arrival("N", "through", 0.0, 100.0, HV.free_speed)]
    res = simulate(arr, "max_pressure")
    v = res.vehicles[0]
    travel = (100.0 + Intersection().movement_path_length("N", "through") + HV.length) / HV.free_speed
    assert v.exit_t == pytest.approx(travel, abs=0.1)
    assert v.enter_t == pytest.approx(100.0 / HV.free_speed, abs=0.1)
    assert res.T_batch == pytest.approx(v.exit_t)


def test_saturated_discharge_headway():
    mv = [Movement("S", "through")] * 12
    res = simulate(batch_arrivals(mv, v_init=0.0 + 1e-9), "max_pressure")
    h = np.array(res.discharge_headways[("S", "through")])
    assert np.all(h >= HV.saturation_headway - 1e-9)
    assert np.all(np.abs(h[1:] - HV.saturation_headway) <= 0.1)


def _check_run(res, hv=HV):
    assert res.conservation_ok
    assert not res.gridlock
    assert res.min_follow_gap >= hv.min_gap - 1e-9
    phases = {p.id: p.movements for p in DEFAULT_PHASES}
    for v in res.vehicles:
        assert v.exit_t > v.enter_t
        assert (v.approach, v.turn) in phases[v.enter_phase]
    for hs in res.discharge_headways.values():
        assert min(hs) >= hv.saturation_headway - 1e-9


@pytest.mark.parametrize("controller", ["webster", "max_pressure"])
@pytest.mark.parametrize("seed", [0, 3])
def test_batch_invariants(controller, seed):
    res = simulate(batch_arrivals(family_movements(20), seed=seed), controller)
    assert res.n_exited == 20
    _check_run(res)
    assert res.T_batch == pytest.approx(max(v.exit_t for v in res.vehicles))


@pytest.mark.parametrize("controller", ["webster", "max_pressure"])
def test_demand_run_invariants(controller):
    res = simulate(Demand({a: 300.0 for a in "SWNE"}), controller, duration=300.0, seed=4)
    assert res.n_spawned > 50
    _check_run(res)


def test_determinism():
    d = Demand({"S": 400.0, "W": 200.0, "N": 300.0, "E": 100.0})
    a = simulate(d, "webster", duration=200.0, seed=11)
    b = simulate(d, "webster", duration=200.0, seed=11)
    assert [(v.enter_t, v.exit_t) for v in a.vehicles] == [(v.enter_t, v.exit_t) for v in b.vehicles]
    assert a.queue_trace == b.queue_trace


def test_demand_has_a_turn():
    arr = Demand({"S": 100.0}, turn_ratios={"through": 1.0}).arrivals(n_vehicles=5, seed=0)
    assert len(arr) == 5
    assert any(a.turn != "through" for a in arr)
    with pytest.raises(ValueError):
        Demand({"S": 100.0}).arrivals()


def test_batch_arrivals_seed_permutes_turns():
    mv = family_movements(10)
    a0 = batch_arrivals(mv)
    a1 = batch_arrivals(mv, seed=1)
    assert [a.turn for a in a0] == [m.turn for m in mv]
    assert sorted(a.turn for a in a1) == sorted(m.turn for m in mv)
    assert [a.position for a in a0] == [a.position for a in a1]


def test_unserved_movement_rejected():
    phases = (SignalPhase(0, {("N", "through")}),)
    with pytest.raises(ValueError):
        simulate([Arrival("S", "left", 0.0, 20.0, 5.0)], "max_pressure", phases=phases)


def test_unknown_controller():
    with pytest.raises(ValueError):
        simulate([], "fixed")


def test_hv_model_validation():
    with pytest.raises(ValueError):
        HvModel(saturation_headway=0.0)
