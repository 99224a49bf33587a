"""CSV and SVG writers for solutions, simulations, capacity curves and sweeps.

Every CSV has a header row and a fixed column order. Floats are written with
``repr`` so identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

TRAJECTORY_COLUMNS = ("vehicle_id", "node", "t", "x", "y", "theta", "V", "r", "beta", "a", "delta")
SOLUTION_SUMMARY_COLUMNS = ("status", "t_f", "worst_pair_margin", "worst_road_margin", "validation_passed",
                            "K", "iterations", "solver_status")
SIGNAL_VEHICLE_COLUMNS = ("vehicle_id", "approach", "turn", "spawn_t", "enter_t", "exit_t")
QUEUE_TRACE_COLUMNS = ("t", "movement", "queue_len")
CURVE_COLUMNS = ("N", "T", "throughput", "status")
CAPACITY_SUMMARY_COLUMNS = ("regime", "N", "T", "C", "terminal_reason")
SWEEP_COLUMNS = ("regime", "v_init", "v_max", "a_max", "N", "T", "C", "C_norm", "status", "source")
FIT_COLUMNS = ("regime", "v_init", "a_max", "quantity", "c0", "c1", "c2", "c3", "c4", "residual")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Lane-free solutions


def trajectory_rows(sol):
    times = sol.times
    for i, (X, U) in enumerate(zip(sol.states, sol.inputs)):
        for k in range(X.shape[0]):
            r, beta, V, x, y, th = X[k]
            a, d = (U[k] if k < U.shape[0] else (None, None))
            yield (i, k, times[k], x, y, th, V, r, beta, a, d)


def write_trajectories(path, sol):
    return write_csv(path, TRAJECTORY_COLUMNS, trajectory_rows(sol))


def write_solution_summary(path, sol, report=None):
    row = (
        sol.status,
        sol.t_f,
        report.worst_pair_margin if report else None,
        report.worst_road_margin if report else None,
        report.passed if report else None,
        sol.K,
        sol.iterations,
        sol.solver_status,
    )
    return write_csv(path, SOLUTION_SUMMARY_COLUMNS, [row])


def report_dict(report) -> dict:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    return {
        "passed": bool(report.passed),
        "worst_pair_margin": clean(float(report.worst_pair_margin)),
        "worst_road_margin": clean(float(report.worst_road_margin)),
        "worst_pair": list(report.worst_pair) if report.worst_pair else None,
        "worst_road": list(report.worst_road) if report.worst_road else None,
        "limit_violations": [
            {"vehicle": i, "node": k, "bound": v.bound, "value": float(v.value), "limit": float(v.limit)}
            for i, k, v in report.limit_violations
        ],
        "terminal_pose_error": float(report.terminal_pose_error),
        "max_defect": float(report.max_defect),
        "completion_times": [clean(float(c)) for c in report.completion_times],
        "messages": list(report.messages),
    }


def write_report(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_dict(report), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Signalised runs


def write_signal_vehicles(path, result):
    rows = ((v.id, v.approach, v.turn, v.spawn_t, v.enter_t, v.exit_t) for v in result.vehicles)
    return write_csv(path, SIGNAL_VEHICLE_COLUMNS, rows)


def write_queue_trace(path, result):
    rows = ((t, f"{mv[0]}-{mv[1]}", n) for t, mv, n in result.queue_trace)
    return write_csv(path, QUEUE_TRACE_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Capacity


def write_capacity_curve(path, result):
    return write_csv(path, CURVE_COLUMNS, ((p.N, p.T, p.throughput, p.status) for p in result.curve))


def write_capacity_summary(path, results):
    rows = [(r.regime, r.N, r.T, r.C, r.terminal_reason) for r in results]
    return write_csv(path, CAPACITY_SUMMARY_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Sweeps


def write_sweep_table(path, table):
    rows = ((r.regime, r.v_init, r.v_max, r.a_max, r.N, r.T, r.C, r.C_norm, r.status, r.source) for r in table.rows)
    return write_csv(path, SWEEP_COLUMNS, rows)


def write_fits(path, fits):
    """``fits`` is a list of ``(regime, v_init, a_max, quantity, QuarticFit)``."""
    rows = ((reg, vi, am, q, *f.coeffs, f.residual) for reg, vi, am, q, f in fits)
    return write_csv(path, FIT_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Plots (optional dependency)


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib; install the 'plot' extra") from exc
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "lanefree"
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_trajectories(path, sol, scn):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    for road in scn.roads:
        v = road.vertices
        ax.fill(v[:, 0], v[:, 1], color="0.85")
    for i, X in enumerate(sol.states):
        ax.plot(X[:, 3], X[:, 4], marker=".", ms=3, label=scn.vehicles[i].label or f"vehicle {i}")
    ax.set_aspect("equal")
    lim = max(np.max(np.abs(np.concatenate([X[:, 3:5] for X in sol.states]))) + 5.0, 15.0)
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"t_f = {sol.t_f:.3f} s")
    ax.legend(fontsize=7)
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_capacity_curves(path, results):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in results:
        pts = [(p.N, p.throughput) for p in r.curve if p.status == "ok"]
        if pts:
            n, c = zip(*pts)
            ax.plot(n, c, marker="o", ms=3, label=r.regime)
    ax.set_xlabel("N [veh]")
    ax.set_ylabel("throughput [veh/h]")
    ax.legend()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_sweep(path, table, quantity="T"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    series = sorted({(r.regime, r.v_init, r.a_max) for r in table.rows})
    for reg, vi, am in series:
        pts = [(r.v_max, getattr(r, quantity)) for r in table.rows
               if (r.regime, r.v_init, r.a_max) == (reg, vi, am) and r.status == "ok"]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, marker="o", ms=3, label=f"{reg} v0={vi:g} a={am:g}")
    ax.set_xlabel("maximum speed [m/s]")
    ax.set_ylabel({"T": "crossing time [s]", "C": "capacity [veh/h]"}.get(quantity, quantity))
    ax.legend(fontsize=7)
    out = _save(fig, path)
    plt.close(fig)
    return out
