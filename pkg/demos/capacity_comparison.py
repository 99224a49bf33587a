"""Compare lane-free capacity with two signal controllers.

Capacity is C = 3600 N / T for the largest batch N that clears the
intersection.  For the lane-free regime we grow N until the optimal
control problem stops solving (or the budget runs out); for the signal
controllers we sweep N and keep the peak of the throughput curve.

    python demos/capacity_comparison.py [N_budget]

A budget of 4 takes a few minutes on a laptop.
"""
import sys

from lanefree_capacity.capacity import SignalRun, improvement_ratio, lanefree_capacity, signalized_capacity
from lanefree_capacity.ocp import TranscriptionConfig
from lanefree_capacity.scenario import scenario_family

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 4

lf = lanefree_capacity(scenario_family(), TranscriptionConfig(), N_budget=budget)
print(f"lane-free:    N={lf.N:3d}  T={lf.T:7.2f} s  C={lf.C:7.0f} veh/h  ({lf.terminal_reason})")

for controller in ("webster", "max_pressure"):
    sig = signalized_capacity(SignalRun(seed=0), controller, tuple(range(1, 49)))
    print(f"{controller:13s} N={sig.N:3d}  T={sig.T:7.2f} s  C={sig.C:7.0f} veh/h  "
          f"-> lane-free is x{improvement_ratio(lf.C, sig.C):.2f}")
