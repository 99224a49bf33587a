"""How the lane-free crossing time responds to speed and acceleration limits.

Runs a reduced sweep (two speed limits, both acceleration limits, both
entry speeds) and fits a quartic to each crossing-time curve.  Raising the
acceleration limit shortens the crossing; raising the speed limit helps
only until the vehicles can no longer reach it inside the box, after
which the curve goes flat.

    python demos/sensitivity.py
"""
import numpy as np

from lanefree_capacity.sweep import SweepBase, SweepGrid, detect_plateau, fit_quartic, run_sweep

grid = SweepGrid(v_max=(10.0, 14.0, 18.0, 22.0, 26.0), a_max=(2.0, 4.0), v_init=(5.0, 10.0))
table = run_sweep(grid, SweepBase())

print(f"{'v_init':>6} {'a_max':>5} {'v_max':>5} {'T [s]':>7} {'C [veh/h]':>9} {'C_norm':>6}")
for r in table.rows:
    print(f"{r.v_init:6.1f} {r.a_max:5.1f} {r.v_max:5.1f} {r.T:7.3f} {r.C:9.0f} {r.C_norm:6.3f}")

for vi in grid.v_init:
    for am in grid.a_max:
        curve = table.curve("lane_free", vi, am)
        x, y = np.array(curve).T
        fit = fit_quartic(x, y)
        print(f"v_init={vi:4.1f} a_max={am:3.1f}: plateau from v_max={detect_plateau(curve)}, "
              f"quartic residual {fit.residual:.2e} s")
