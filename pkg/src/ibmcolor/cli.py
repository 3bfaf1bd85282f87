"""Command-line entry point: ``ibmcolor {simulate,pde,rate,scenario}``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import io as io_mod
from .experiments import (
    Scenario,
    builtin_scenarios,
    initial_profile,
    load_scenario,
    realized_params,
    run_scenario,
)
from .hydro_pde import PdeConfig, solve_colored_system, solve_perturbed_system
from .ldp_rate import GradientControl, control_energy, dynamic_rate, optimal_controls
from .model_core import DomainError
from .particles import ConfigError, SimConfig, partition_sizes, simulate_replicas

OUT_ENV = "IBMCOLOR_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV, "runs"))


def _model_args(p):
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--masses", type=float, nargs="+", default=[0.5, 0.5])
    p.add_argument("--initial", default="cosine_step",
                   choices=["uniform", "cosine_step", "proportional_cosine", "smooth_cosine"])
    p.add_argument("--amplitude", type=float, default=0.5)
    p.add_argument("--T", type=float, default=0.25)


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for replicas")
    p.add_argument("--format", choices=["csv", "json"], default="csv")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ibmcolor", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run particle replicas")
    _model_args(p)
    _common(p)
    p.add_argument("--N", type=int, default=64)
    p.add_argument("--c0", type=float, default=0.1, help="time step is c0 / N^2")
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--snapshots", type=int, default=10)
    p.add_argument("--estimator", default="bridge", choices=["bridge", "band"])
    p.add_argument("--swap-rule", default="poisson", choices=["poisson", "thinning"])

    p = sub.add_parser("pde", help="solve the coloured hydrodynamic system")
    _model_args(p)
    _common(p)
    p.add_argument("--K", type=int, default=256)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--scheme", default="explicit", choices=["explicit", "semi_implicit"])

    p = sub.add_parser("rate", help="dynamic rate of a (possibly driven) PDE solution")
    _model_args(p)
    _common(p)
    p.add_argument("--K", type=int, default=128)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--control", type=float, default=0.0, help="amplitude of a sin(2 pi x) gradient control")

    p = sub.add_parser("scenario", help="scenario files")
    ssub = p.add_subparsers(dest="action", required=True)
    r = ssub.add_parser("run", help="run a TOML scenario, a manifest.json, or a built-in name")
    r.add_argument("scenario")
    _common(r)
    ssub.add_parser("list-builtin", help="list built-in scenarios")
    return ap


def _pde_config(args, params) -> PdeConfig:
    return PdeConfig.auto(args.K, args.T, params, getattr(args, "scheme", "explicit"), frames=args.frames)


def cmd_simulate(args) -> int:
    init = initial_profile(args.initial, 256, args.masses, args.amplitude)
    params = realized_params(args.lam, init)
    snaps = max(args.snapshots, 1)
    n = max(int(np.ceil(args.T * args.N**2 / args.c0 / snaps)), 1) * snaps
    cfg = SimConfig(params=params, N=args.N, dt=args.T / n, T=args.T, seed=args.seed,
                    initial="uniform" if args.initial == "uniform" else init,
                    color_counts=partition_sizes(args.N, params.color_masses),
                    estimator=args.estimator, swap_rule=args.swap_rule, snapshot_every=n // snaps)
    recs = simulate_replicas(cfg, args.replicas, args.threads)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    for i, rec in enumerate(recs):
        io_mod.write_record(out / f"replica_{i:03d}.{ext}", rec, ext)
    io_mod.write_json(out / "manifest.json", {"config": cfg.to_dict(), "replicas": args.replicas,
                                              "digests": [r.digest() for r in recs]})
    return EXIT_OK


def cmd_pde(args) -> int:
    init = initial_profile(args.initial, args.K, args.masses, args.amplitude)
    params = realized_params(args.lam, init)
    cfg = _pde_config(args, params)
    traj = solve_colored_system(init, cfg)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    io_mod.write_trajectory(out / f"pde.{args.format}", traj, args.format)
    io_mod.write_json(out / "manifest.json", {"config": cfg.to_dict(), "initial": vars(args)})
    return EXIT_OK


def cmd_rate(args) -> int:
    init = initial_profile(args.initial, args.K, args.masses, args.amplitude)
    params = realized_params(args.lam, init)
    cfg = _pde_config(args, params)
    result = {"units": "rate"}
    if args.control:
        control = GradientControl.sine(args.control, params.m)
        traj = solve_perturbed_system(init, optimal_controls(control, params), cfg)
        result["control_energy"] = control_energy(traj, control, params)
    else:
        traj = solve_colored_system(init, cfg)
    rep = dynamic_rate(traj, params)
    result.update(rep.to_dict())
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    io_mod.write_json(out / "rate.json", result)
    print(json.dumps({k: result[k] for k in ("i_dyn", "control_energy") if k in result}))
    return EXIT_OK


def cmd_scenario(args) -> int:
    if args.action == "list-builtin":
        for name in builtin_scenarios():
            print(name)
        return EXIT_OK
    builtins = builtin_scenarios()
    if args.scenario in builtins:
        sc = Scenario.from_dict(builtins[args.scenario])
    else:
        sc = load_scenario(args.scenario)
    if args.seed:
        sc.seed = args.seed
    out = Path(args.out) if args.out else Path(sc.output_dir or os.environ.get(OUT_ENV, "runs")) / sc.name
    res = run_scenario(sc, out, workers=args.threads, fmt=args.format)
    for e in res.report["comparisons"]:
        print(f"{e['kind']}: {'PASS' if e['passed'] else 'FAIL'} value={e['value']} tol={e['tolerance']}")
    return EXIT_OK if res.passed else EXIT_FAIL


COMMANDS = {"simulate": cmd_simulate, "pde": cmd_pde, "rate": cmd_rate, "scenario": cmd_scenario}


def _error(args, kind: str, exc: Exception) -> None:
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if kind == "runtime":
        err["traceback"] = traceback.format_exc()
    print(json.dumps(err), file=sys.stderr)
    out = getattr(args, "out", None)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        io_mod.write_json(Path(out) / "error.json", err)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DomainError, FileNotFoundError, KeyError, TypeError) as exc:
        _error(args, "config", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        _error(args, "runtime", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
