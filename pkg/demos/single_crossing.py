"""Solve one lane-free crossing of three vehicles and check it.

The family scenario puts one vehicle on each of three approaches, one of
them turning left.  The solver returns the minimum-time trajectories and
the validator re-checks them on a grid ten times finer than the
transcription, with an exact polygon distance.

    python demos/single_crossing.py
"""
from lanefree_capacity.ocp import TranscriptionConfig, solve_scenario, validate_solution
from lanefree_capacity.scenario import scenario_family

scn = scenario_family()(3)
sol, _ = solve_scenario(scn, TranscriptionConfig())
print(f"status {sol.status}, t_f = {sol.t_f:.3f} s after {sol.iterations} IPOPT iterations")
for v in scn.vehicles:
    print(f"  {v.label}: enters at {v.v0:.1f} m/s")

rep = validate_solution(sol, scn, dense_factor=10)
print(f"validation passed: {rep.passed}")
print(f"  closest vehicle pair: {rep.worst_pair_margin:+.3f} m beyond the safety distance")
print(f"  closest road edge:    {rep.worst_road_margin:+.3f} m")
