"""Plain-text outputs: CSV tables at full precision and sorted-key JSON."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .model_core import FieldTrajectory, cell_centers


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g") if math.isfinite(v) else str(float(v))


def write_csv(path, header, rows) -> Path:
    """Write a numeric table; floats carry 17 significant digits and round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.atleast_2d(np.asarray(rows)):
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open() as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n")
    return path


def trajectory_rows(traj: FieldTrajectory) -> tuple[list[str], np.ndarray]:
    """Long format: one row per (time, cell) with one column per colour."""
    x = cell_centers(traj.K)
    L = len(traj.times)
    t = np.repeat(traj.times, traj.K)
    xs = np.tile(x, L)
    vals = traj.frames.transpose(0, 2, 1).reshape(L * traj.K, traj.m)
    return ["t", "x"] + [f"rho_{c}" for c in range(traj.m)], np.column_stack([t, xs, vals])


def write_trajectory(path, traj: FieldTrajectory, fmt: str = "csv") -> Path:
    if fmt == "csv":
        return write_csv(path, *trajectory_rows(traj))
    return write_json(path, {"times": traj.times, "frames": traj.frames, "meta": traj.meta})


def write_record(path, rec, fmt: str = "csv") -> Path:
    """Lifted label positions per snapshot, plus local-time totals."""
    if fmt == "csv":
        header = ["t", "label", "color", "lifted", "local_time", "signed"]
        L, N = rec.lifted.shape
        rows = np.column_stack([
            np.repeat(rec.times, N), np.tile(np.arange(N), L), np.tile(rec.colors, L),
            rec.lifted.ravel(), rec.per_color.sum(axis=2).ravel(), rec.signed.ravel(),
        ])
        return write_csv(path, header, rows)
    return write_json(path, {
        "times": rec.times, "colors": rec.colors, "lifted": rec.lifted,
        "per_color": rec.per_color, "signed": rec.signed, "totals": rec.totals,
        "swap_counts": rec.swap_counts, "manifest": rec.manifest,
    })
