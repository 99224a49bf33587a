"""Command-line front end.

Exit codes: 0 ok, 2 input error, 3 infeasible, 4 validation failure,
5 internal error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .capacity import improvement_ratio, lanefree_capacity, signalized_capacity
from .config import ConfigError, dumps, load, template
from .ocp import OcpSolution, ScenarioError, solve_scenario, validate_solution
from .signalized import batch_arrivals, simulate
from .sweep import SweepBase, SweepGrid, detect_plateau, fit_quartic, run_sweep

log = logging.getLogger("lanefree_capacity")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_VALIDATION, EXIT_INTERNAL = 0, 2, 3, 4, 5
REGIME_NAMES = {"lane-free": "lane_free", "webster": "webster", "max-pressure": "max_pressure"}


class InputError(Exception):
    pass


def _load(args):
    try:
        cfg = load(args.scenario)
    except FileNotFoundError as exc:
        raise InputError(f"cannot read {args.scenario}: {exc.strerror}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_init(args) -> int:
    text = dumps(template())
    if args.out == "-":
        sys.stdout.write(text)
    else:
        path = Path(args.out)
        if path.exists() and not args.force:
            raise InputError(f"{path} exists; pass --force to overwrite")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load(args)
    out = _out(args)
    scn = cfg.crossing_scenario()
    try:
        scn.check()
    except ScenarioError as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    sol, report = solve_scenario(scn, cfg.solver, dense_factor=cfg.dense_factor)
    io.write_trajectories(out / "trajectories.csv", sol)
    io.write_solution_summary(out / "summary.csv", sol, report)
    if report is not None:
        io.write_report(out / "validation.json", report)
    if args.plot:
        io.plot_trajectories(out / "trajectories.svg", sol, scn)
    print(f"status={sol.status} t_f={sol.t_f:.4f} s K={sol.K} iterations={sol.iterations}")
    if sol.status != "optimal":
        print(f"solver ended with {sol.status} ({sol.solver_status})", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"worst pair margin={report.worst_pair_margin:.4f} m, worst road margin={report.worst_road_margin:.4f} m")
    if not report.passed:
        print("validation failed: " + "; ".join(report.messages), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _regimes(values):
    names = []
    for v in values or ["lane-free"]:
        if v == "all":
            names += list(REGIME_NAMES.values())
        elif v == "signalised":
            names += ["webster", "max_pressure"]
        else:
            names.append(REGIME_NAMES[v])
    return list(dict.fromkeys(names))


def cmd_capacity(args) -> int:
    cfg = _load(args)
    out = _out(args)
    results = []
    for regime in _regimes(args.regime):
        if regime == "lane_free":
            def progress(n, sol, rep):
                ok = rep.passed if rep is not None else False
                print(f"  lane-free N={n}: {sol.status} t_f={sol.t_f:.4f} validated={ok}")
            res = lanefree_capacity(cfg.family(), cfg.solver, N_start=cfg.N_start, N_budget=cfg.N_max_budget,
                                    dense_factor=cfg.dense_factor, progress=progress)
        else:
            res = signalized_capacity(cfg.signal_run(), regime, cfg.N_grid(), threads=args.threads)
        results.append(res)
        io.write_capacity_curve(out / f"capacity_{regime}_curve.csv", res)
        print(f"{regime}: N={res.N} T={res.T:.4f} s C={res.C:.1f} veh/h ({res.terminal_reason})")
        if regime == "lane_free" and res.solution is not None:
            io.write_trajectories(out / "lane_free_trajectories.csv", res.solution)
            print(f"  t_f spread over passing N: {res.t_f_spread:.4f} s")
        if res.terminal_reason == "budget":
            print(f"warning: {regime} search ended at its budget before the capacity was confirmed", file=sys.stderr)
    io.write_capacity_summary(out / "capacity_summary.csv", results)
    lf = [r for r in results if r.regime == "lane_free"]
    sig = [r for r in results if r.regime != "lane_free"]
    if lf and sig:
        rows = []
        for s in sig:
            ratio = improvement_ratio(lf[0].C, s.C) if s.C > 0 else math.nan
            rows.append(("lane_free", s.regime, lf[0].C, s.C, lf[0].C / s.C if s.C > 0 else math.nan, ratio))
            print(f"lane-free vs {s.regime}: x{rows[-1][4]:.2f} (improvement {100 * ratio:.0f}%)")
        io.write_csv(out / "comparison.csv", ("regime_a", "regime_b", "C_a", "C_b", "ratio", "improvement"), rows)
    if args.plot:
        io.plot_capacity_curves(out / "capacity.svg", results)
    if lf and lf[0].N == 0:
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_simulate_signal(args) -> int:
    cfg = _load(args)
    out = _out(args)
    controller = REGIME_NAMES[args.controller] if args.controller else cfg.controller
    if cfg.demand is not None:
        if cfg.duration is None and args.n is None:
            raise InputError("a demand-driven run needs signal.duration_s or --n")
        res = simulate(cfg.demand, controller, hv=cfg.hv, n_vehicles=args.n, duration=cfg.duration, seed=cfg.seed,
                       inter=cfg.intersection, cfg=cfg.signal)
    else:
        n = args.n or cfg.n_vehicles
        arrivals = batch_arrivals(cfg.movements_for(n), cfg.intersection, cfg.hv, cfg.defaults.v_init,
                                  cfg.defaults.entry_gap, cfg.defaults.queue_gap, cfg.seed)
        res = simulate(arrivals, controller, hv=cfg.hv, inter=cfg.intersection, cfg=cfg.signal)
    io.write_signal_vehicles(out / "signal_vehicles.csv", res)
    io.write_queue_trace(out / "queue_trace.csv", res)
    io.write_csv(out / "signal_summary.csv",
                 ("controller", "spawned", "exited", "T_batch", "throughput", "gridlock", "conservation_ok"),
                 [(controller, res.n_spawned, res.n_exited, res.T_batch, res.throughput, res.gridlock,
                   res.conservation_ok)])
    print(f"{controller}: spawned={res.n_spawned} exited={res.n_exited} T={res.T_batch:.2f} s "
          f"throughput={res.throughput:.1f} veh/h")
    if res.gridlock:
        print("gridlock detected", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _sweep_grid(cfg, args):
    g = cfg.sweep
    v_max = tuple(args.v_max) if args.v_max else g.v_max
    a_max = tuple(args.a_max) if args.a_max else g.a_max
    v_init = tuple(args.v_init) if args.v_init else g.v_init
    if args.points:
        v_max, a_max, v_init = v_max[:args.points], a_max[:args.points], v_init[:args.points]
    regimes = []
    for r in args.regime or ["lane-free"]:
        regimes += {"lane-free": ["lane_free"], "signalised": ["webster", "max_pressure"],
                    "webster": ["webster"], "max-pressure": ["max_pressure"],
                    "all": ["lane_free", "webster", "max_pressure"]}[r]
    return SweepGrid(v_max=v_max, a_max=a_max, v_init=v_init, regimes=tuple(dict.fromkeys(regimes)))


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out(args)
    try:
        grid = _sweep_grid(cfg, args)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    base = SweepBase(n_vehicles=args.n_vehicles or cfg.n_vehicles, intersection=cfg.intersection,
                     defaults=cfg.defaults, cfg=cfg.solver, signal=cfg.signal_run(),
                     signal_grid=tuple(cfg.N_grid()), full_search=args.full_search, N_budget=cfg.N_max_budget)

    def progress(row):
        print(f"  {row.regime} v0={row.v_init:g} vmax={row.v_max:g} amax={row.a_max:g}: "
              f"T={row.T:.4f} C={row.C:.1f} ({row.status})")

    table = run_sweep(grid, base, threads=args.threads, progress=progress)
    io.write_sweep_table(out / "sweep_table.csv", table)
    fits, plateaus = [], []
    for reg in grid.regimes:
        for vi in grid.v_init:
            for am in grid.a_max:
                curve = table.curve(reg, vi, am)
                if len(curve) >= 5:
                    xs, ys = zip(*curve)
                    fits.append((reg, vi, am, "T", fit_quartic(xs, ys)))
                if len(curve) >= 3:
                    onset = detect_plateau(curve, args.rel_tol)
                    plateaus.append((reg, vi, am, onset))
    io.write_fits(out / "sweep_fits.csv", fits)
    io.write_csv(out / "sweep_plateaus.csv", ("regime", "v_init", "a_max", "plateau_onset_v_max"), plateaus)
    if args.plot:
        io.plot_sweep(out / "sweep_T.svg", table, "T")
        io.plot_sweep(out / "sweep_C.svg", table, "C")
    gaps = sum(1 for r in table.rows if r.status != "ok")
    print(f"{len(table.rows)} rows, {gaps} gaps, {len(fits)} quartic fits")
    return EXIT_OK


def _solution_from_csv(path, scn) -> OcpSolution:
    rows = io.read_csv(path)
    if not rows:
        raise InputError(f"{path} has no rows")
    nv = scn.n_vehicles
    by_vehicle = [[] for _ in range(nv)]
    for r in rows:
        i = int(r["vehicle_id"])
        if not 0 <= i < nv:
            raise InputError(f"{path}: vehicle_id {i} not in the scenario")
        by_vehicle[i].append(r)
    states, inputs = [], []
    for i, rs in enumerate(by_vehicle):
        rs.sort(key=lambda r: int(r["node"]))
        X = np.array([[float(r[c]) for c in ("r", "beta", "V", "x", "y", "theta")] for r in rs])
        U = np.array([[float(r["a"]), float(r["delta"])] for r in rs[:-1]])
        states.append(X)
        inputs.append(U)
    K = inputs[0].shape[0]
    t_f = float(by_vehicle[0][-1]["t"])
    return OcpSolution("optimal", t_f, states, inputs, {}, t_f, K, "loaded", 0, 0.0, 0.0)


def cmd_validate(args) -> int:
    cfg = _load(args)
    scn = cfg.crossing_scenario()
    try:
        scn.check()
    except ScenarioError as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"scenario ok: {scn.n_vehicles} vehicles, {len(scn.roads)} road blocks")
    if not args.trajectories:
        return EXIT_OK
    sol = _solution_from_csv(args.trajectories, scn)
    report = validate_solution(sol, scn, args.dense_factor or cfg.dense_factor)
    if args.out:
        io.write_report(_out(args) / "validation.json", report)
    print(f"worst pair margin={report.worst_pair_margin:.4f} m, worst road margin={report.worst_road_margin:.4f} m")
    if not report.passed:
        print("validation failed: " + "; ".join(report.messages), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanefree-capacity", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("scenario", help="JSON scenario file")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--plot", action="store_true", help="also write SVG plots")

    sp = sub.add_parser("init", help="write a template scenario file")
    sp.add_argument("--out", default="scenario.json", help="path, or - for stdout")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("solve", help="solve and validate one lane-free crossing")
    common(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("capacity", help="capacity search for one or more regimes")
    common(sp)
    sp.add_argument("--regime", action="append",
                    choices=["lane-free", "webster", "max-pressure", "signalised", "all"])
    sp.set_defaults(func=cmd_capacity)

    sp = sub.add_parser("simulate-signal", help="run the signalised simulator once")
    common(sp)
    sp.add_argument("--controller", choices=["webster", "max-pressure"])
    sp.add_argument("--n", type=int, default=None, help="vehicle budget")
    sp.set_defaults(func=cmd_simulate_signal)

    sp = sub.add_parser("sweep", help="sensitivity sweep over speed and acceleration limits")
    common(sp)
    sp.add_argument("--regime", action="append",
                    choices=["lane-free", "webster", "max-pressure", "signalised", "all"])
    sp.add_argument("--v-max", type=float, nargs="+")
    sp.add_argument("--a-max", type=float, nargs="+")
    sp.add_argument("--v-init", type=float, nargs="+")
    sp.add_argument("--points", type=int, default=None, help="keep only the first n values of each axis")
    sp.add_argument("--n-vehicles", type=int, default=None)
    sp.add_argument("--full-search", action="store_true", help="N_max search at every lane-free point")
    sp.add_argument("--rel-tol", type=float, default=0.01, help="plateau tolerance")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("validate", help="check a scenario file and optionally a trajectory CSV")
    common(sp, out_required=False)
    sp.add_argument("--trajectories", help="trajectory CSV written by solve")
    sp.add_argument("--dense-factor", type=int, default=None)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ScenarioError as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
