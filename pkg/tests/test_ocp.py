import math

import numpy as np
import pytest

from lanefree_capacity.dynamics import ControlInput, Limits, PhysicalParams, VehicleState, stability_derivatives, step_rk4
from lanefree_capacity.geometry import (
    DualPair,
    Polytope,
    Pose,
    VehicleShape,
    distance_oracle,
    dual_distance_value,
    dual_residuals,
    vehicle_polytope,
)
from lanefree_capacity.ocp import (
    DUAL_BLOCK,
    CrossingScenario,
    OcpSolution,
    ScenarioError,
    TranscriptionConfig,
    VehicleSpec,
    initial_guess,
    padded_guess,
    seed_duals,
    solve_scenario,
    t_f_bounds,
    transcribe,
    validate_solution,
)
from lanefree_capacity.scenario import (
    Intersection,
    Movement,
    VehicleDefaults,
    build_scenario,
    scenario_family,
    with_limits,
)

PARAMS = stability_derivatives(PhysicalParams(), 10.0)


def straight_vehicle(v_max=25.0, a_max=3.0, start=Pose(0, 0, 0), goal=Pose(100, 0, 0), v0=10.0):
    return VehicleSpec(VehicleShape(), PARAMS, Limits(V_max=v_max, a_max=a_max), start, v0, goal)


def test_variable_count_single_vehicle():
    K = 12
    nlp = transcribe(CrossingScenario((straight_vehicle(),)), TranscriptionConfig(K=K))
    assert nlp.n_vars == 6 * (K + 1) + 2 * K + 1
    assert nlp.i_duals == {}


def test_dual_block_counts():
    K = 10
    scn = scenario_family()(3)
    nlp = transcribe(scn, TranscriptionConfig(K=K))
    assert len(nlp.pair_keys) == 3
    assert len(nlp.road_keys) == 12
    assert nlp.n_vars == 1 + 3 * (6 * (K + 1) + 2 * K) + 15 * (K + 1) * DUAL_BLOCK
    for n in (2, 4, 5):
        nlp = transcribe(scenario_family()(n), TranscriptionConfig(K=K))
        assert len(nlp.pair_keys) == n * (n - 1) // 2


def test_config_validation():
    with pytest.raises(ValueError):
        TranscriptionConfig(K=5)
    with pytest.raises(ValueError):
        TranscriptionConfig(t_f_bounds=(5.0, 1.0))
    with pytest.raises(ValueError):
        TranscriptionConfig(route="diagonal")


def test_overlapping_start_is_rejected():
    a = straight_vehicle()
    b = straight_vehicle(start=Pose(1.0, 0.5, 0.0), goal=Pose(100, 20, 0))
    with pytest.raises(ScenarioError) as err:
        transcribe(CrossingScenario((a, b)))
    assert err.value.pair == (0, 1)


def test_guess_straight():
    g = initial_guess(CrossingScenario((straight_vehicle(),)))
    assert g.t_f == pytest.approx(10.0)
    assert np.allclose(g.states[0][:, 2], 10.0)
    assert np.allclose(g.inputs[0], 0.0)
    assert np.allclose(np.diff(g.states[0][:, 3]), 100.0 / 40)


def test_guess_degenerate_hits_lower_bound():
    v = straight_vehicle(goal=Pose(0, 0, 0))
    scn = CrossingScenario((v,))
    cfg = TranscriptionConfig()
    assert initial_guess(scn, cfg).t_f == pytest.approx(t_f_bounds(scn, cfg)[0])


def test_seeded_duals_have_small_residuals():
    scn = build_scenario([Movement("S", "through"), Movement("W", "left")])
    g = initial_guess(scn)
    for key, blk in g.duals.items():
        for k in range(g.K + 1):
            x = [g.states[i][k] for i in range(2)]
            P = vehicle_polytope(Pose(*x[key[1]][3:6]), VehicleShape())
            Q = vehicle_polytope(Pose(*x[key[2]][3:6]), VehicleShape()) if key[0] == "pair" else scn.roads[key[2]]
            if distance_oracle(P, Q) < 1e-6:
                continue
            d = DualPair(blk[k, :4], blk[k, 4:8], blk[k, 8:])
            rp, rq = dual_residuals(P, Q, d)
            assert np.linalg.norm(rp) <= 1e-6 and np.linalg.norm(rq) <= 1e-6


def test_padded_guess_keeps_previous_vehicles():
    fam = scenario_family()
    cfg = TranscriptionConfig(K=10)
    prev = initial_guess(fam(2), cfg)
    prev.states[0][:, 0] = 0.123
    g = padded_guess(fam(3), cfg, prev)
    assert len(g.states) == 3
    assert np.allclose(g.states[0][:, 0], 0.123)
    assert set(g.duals) == set(transcribe(fam(3), cfg).i_duals)
    with pytest.raises(ValueError):
        padded_guess(fam(1), cfg, prev)


def test_bang_bang_oracle():
    # Full throttle for 5 s covers 87.5 m, then 12.5 m at 25 m/s.
    sol, rep = solve_scenario(CrossingScenario((straight_vehicle(),)), TranscriptionConfig(K=40))
    assert sol.status == "optimal"
    assert sol.t_f == pytest.approx(5.5, rel=0.03)
    assert rep.passed


def test_speed_capped_at_initial_speed():
    sol, rep = solve_scenario(CrossingScenario((straight_vehicle(v_max=10.0),)), TranscriptionConfig(K=40))
    assert sol.status == "optimal"
    assert sol.t_f == pytest.approx(10.0, rel=0.01)
    assert rep.passed


def _corridor():
    # A 10 m wide road along x between two long blocks.
    top = Polytope([[1, 0], [-1, 0], [0, 1], [0, -1]], [80, 80, 20, -5])
    bottom = Polytope([[1, 0], [-1, 0], [0, 1], [0, -1]], [80, 80, -5, 20])
    return (top, bottom)


def test_head_on_swap_lanes():
    a = straight_vehicle(start=Pose(-30, -2.5, 0), goal=Pose(30, 2.5, 0))
    b = straight_vehicle(start=Pose(30, 2.5, math.pi), goal=Pose(-30, -2.5, math.pi))
    scn = CrossingScenario((a, b), roads=_corridor())
    sol, rep = solve_scenario(scn, TranscriptionConfig(K=40))
    assert sol.status == "optimal"
    assert rep.worst_pair_margin >= -1e-3
    assert rep.worst_road_margin >= -1e-3
    assert rep.passed


def test_validation_catches_inter_node_collision():
    # Vehicle 0 drives along x at 25 m/s with 1 s between nodes; vehicle 1
    # creeps across its path between two nodes.
    K, dt = 10, 1.0
    fast = np.zeros((K + 1, 6))
    s = VehicleState(V=25.0, x=0.0)
    for k in range(K + 1):
        fast[k] = s.as_array()
        for _ in range(10):
            s = step_rk4(s, ControlInput(), PARAMS, dt / 10)
    slow = np.zeros((K + 1, 6))
    s = VehicleState(V=0.5, x=37.5, y=-2.5, theta=math.pi / 2)
    for k in range(K + 1):
        slow[k] = s.as_array()
        for _ in range(10):
            s = step_rk4(s, ControlInput(), PARAMS, dt / 10)
    states = [fast, slow]
    specs = tuple(
        VehicleSpec(VehicleShape(), PARAMS, Limits(), Pose(*x[0, 3:6]), float(x[0, 2]), Pose(*x[-1, 3:6]))
        for x in states
    )
    scn = CrossingScenario(specs)
    duals = seed_duals(scn, states)
    sol = OcpSolution("optimal", K * dt, states, [np.zeros((K, 2))] * 2, duals, K * dt, K)
    # Node-wise the dual certificate holds.
    for k in range(K + 1):
        P = vehicle_polytope(Pose(*fast[k, 3:6]), VehicleShape())
        Q = vehicle_polytope(Pose(*slow[k, 3:6]), VehicleShape())
        d = sol.dual_pair(("pair", 0, 1), k)
        assert dual_distance_value(P, Q, d) >= scn.d_min
    rep = validate_solution(sol, scn, dense_factor=10)
    assert not rep.passed
    # The footprints overlap, so the oracle distance is 0.
    assert rep.worst_pair_margin == pytest.approx(-scn.d_min)
    assert rep.worst_pair[:2] == (0, 1)
    assert 1.0 < rep.worst_pair[2] < 2.0


@pytest.fixture(scope="module")
def three_cav():
    scn = scenario_family()(3)
    sol, rep = solve_scenario(scn, TranscriptionConfig())
    return scn, sol, rep


def test_three_cav_solution_is_safe(three_cav):
    scn, sol, rep = three_cav
    assert any(v.label.split("-")[1] == "left" for v in scn.vehicles)
    assert sol.status == "optimal"
    assert rep.passed
    assert rep.worst_pair_margin >= -1e-3 and rep.worst_road_margin >= -1e-3
    assert rep.terminal_pose_error < 1e-3
    assert all(t <= sol.t_f + 1e-9 for t in rep.completion_times)


def test_three_cav_weak_duality_at_nodes(three_cav):
    scn, sol, _ = three_cav
    for k in range(sol.K + 1):
        polys = [vehicle_polytope(Pose(*sol.states[i][k, 3:6]), v.shape) for i, v in enumerate(scn.vehicles)]
        for key in sol.duals:
            d = sol.dual_pair(key, k)
            P = polys[key[1]]
            Q = polys[key[2]] if key[0] == "pair" else scn.roads[key[2]]
            margin = scn.d_min if key[0] == "pair" else scn.d_rmin
            val = dual_distance_value(P, Q, d)
            assert val >= margin - 1e-5
            # The solver enforces the stationarity rows only to tolerance.
            rp, rq = dual_residuals(P, Q, d)
            slack = 50.0 * (np.linalg.norm(rp) + np.linalg.norm(rq))
            assert val <= distance_oracle(P, Q) + 1e-6 + slack


def test_time_scaling_consistency():
    scn = build_scenario([Movement("S", "left")])
    a, _ = solve_scenario(scn, TranscriptionConfig(K=20))
    b, _ = solve_scenario(scn, TranscriptionConfig(K=40))
    assert a.status == b.status == "optimal"
    assert abs(a.t_f - b.t_f) / b.t_f < 0.02


@pytest.mark.parametrize("field, lo, hi", [("a_max", 2.0, 4.0), ("V_max", 12.0, 20.0)])
def test_monotone_in_limits(field, lo, hi):
    inter = Intersection()
    t = []
    for val in (lo, hi):
        d = with_limits(VehicleDefaults(), **{field: val})
        sol, rep = solve_scenario(build_scenario([Movement("W", "left")], inter, d), TranscriptionConfig())
        assert sol.status == "optimal" and rep.passed
        t.append(sol.t_f)
    assert t[1] <= t[0] * 1.005


def test_tight_time_bound_is_not_optimal():
    cfg = TranscriptionConfig(t_f_bounds=(1.0, 2.0), max_iter=400)
    sol, rep = solve_scenario(CrossingScenario((straight_vehicle(),)), cfg)
    assert sol.status in ("infeasible", "max_iter")
    assert rep is None


def test_iteration_callback_sees_every_iterate():
    seen = []
    sol, _ = solve_scenario(CrossingScenario((straight_vehicle(),)), TranscriptionConfig(K=20), callback=seen.append)
    assert seen and seen[0].iteration == 0
    assert [i.iteration for i in seen] == list(range(len(seen)))
    assert len(seen) >= sol.iterations
