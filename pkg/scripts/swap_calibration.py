"""Swap events per unit pair local time for both swap rules across time steps.

At equilibrium the target is lam * N.  The Poisson rule is unbiased; the
single-swap thinning rule falls short by an amount that depends on c0 but
not on N.

    python3 scripts/swap_calibration.py --N 64 256 --c0 0.1 0.01 0.002
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from ibmcolor import io as io_mod
from ibmcolor.model_core import ModelParams
from ibmcolor.particles import SimConfig, simulate_replicas, swap_rate_statistic


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[64, 256])
    ap.add_argument("--c0", type=float, nargs="+", default=[0.1, 0.01, 0.002])
    ap.add_argument("--lam", type=float, default=1.0)
    ap.add_argument("--T", type=float, default=0.01)
    ap.add_argument("--replicas", type=int, default=8)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="runs/swap_calibration")
    args = ap.parse_args(argv)

    rows = []
    for N in args.N:
        for c0 in args.c0:
            for rule in ("poisson", "thinning"):
                cfg = SimConfig(params=ModelParams(args.lam), N=N, dt=c0 / N**2, T=args.T, seed=args.seed,
                                swap_rule=rule, snapshot_every=10**9)
                rate, se = swap_rate_statistic(simulate_replicas(cfg, args.replicas, workers=args.threads))
                row = {"N": N, "c0": c0, "rule": rule, "rate": rate, "se": se, "target": args.lam * N,
                       "relative_bias": rate / (args.lam * N) - 1}
                rows.append(row)
                print(json.dumps(row), flush=True)
    io_mod.write_json(Path(args.out) / "swap_calibration.json", rows)


if __name__ == "__main__":
    main()
