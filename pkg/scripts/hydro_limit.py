"""Hydrodynamic-limit study: replica-averaged colour fields versus the PDE at growing N.

Default settings: m=2, lam=1, step colouring of a cosine total density,
32 replicas per N, T=0.25, dt = c0 / N^2 with c0 = 0.1.

    python3 scripts/hydro_limit.py --N 64 256 1024 --out runs/hydro_limit
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from ibmcolor import io as io_mod
from ibmcolor.experiments import hydro_limit_scenario, run_scenario


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[64, 256, 1024])
    ap.add_argument("--replicas", type=int, default=32)
    ap.add_argument("--c0", type=float, default=0.1)
    ap.add_argument("--T", type=float, default=0.25)
    ap.add_argument("--lam", type=float, default=1.0)
    ap.add_argument("--snapshots", type=int, default=5)
    ap.add_argument("--field-K", dest="field_K", type=int, default=32)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="runs/hydro_limit")
    args = ap.parse_args(argv)

    out = Path(args.out)
    summary = []
    for N in args.N:
        t0 = time.perf_counter()
        sc = hydro_limit_scenario(N, args.replicas, args.c0, args.T, args.lam, args.seed, args.field_K, args.snapshots)
        res = run_scenario(sc, out / f"N{N}", workers=args.threads)
        entry = res.report["comparisons"][0]
        row = {"N": N, "l1_final": entry["value"], "seconds": time.perf_counter() - t0}
        summary.append(row)
        print(json.dumps(row), flush=True)
    l1 = np.array([r["l1_final"] for r in summary])  # (len(N), m)
    verdict = {
        "runs": summary,
        "strictly_decreasing": bool(np.all(np.diff(l1, axis=0) < 0)),
        "final_within_0.1": bool(max(summary[-1]["l1_final"]) <= 0.1),
        "total_seconds": sum(r["seconds"] for r in summary),
    }
    io_mod.write_json(out / "summary.json", verdict)
    print(json.dumps(verdict))


if __name__ == "__main__":
    main()
