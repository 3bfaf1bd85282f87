"""Scenario harness: build configs, run simulators and solvers, compare, report."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as io_mod
from .hydro_pde import PdeConfig, heat_mode, solve_colored_system, solve_heat, solve_perturbed_system
from .ldp_rate import GradientControl, control_energy, dynamic_rate, optimal_controls
from .model_core import ColorField, DomainError, FieldTrajectory, ModelParams, cell_centers
from .particles import (
    ConfigError,
    RunRecord,
    SimConfig,
    empirical_color_field,
    partition_sizes,
    replacement_residual,
    simulate_replicas,
    tightness_statistic,
)

SCHEMA_VERSION = 1
COMPARISONS = ("sim_vs_pde", "rate_zero", "rate_cost_match", "tagged_variance",
               "replacement_residual", "tightness", "closure")
TIME_MATCH = 1e-9


# --- initial profiles --------------------------------------------------------------

def initial_profile(kind: str, K: int, masses, amplitude: float = 0.5) -> ColorField:
    """Initial colour densities on ``K`` cells.

    ``uniform``: constant total split by ``masses``;
    ``proportional_cosine``: ``rho_c = mass_c (1 + a cos 2 pi x)``;
    ``cosine_step``: total ``1 + a cos 2 pi x`` cut into consecutive arcs of
    the requested masses (arcs end on cell edges);
    ``smooth_cosine``: total ``1 + a cos 2 pi x`` split by smooth positive fractions.
    """
    x = cell_centers(K)
    masses = np.asarray(masses, dtype=float)
    m = masses.size
    total = heat_mode(x, 0.0, amplitude)
    if kind == "uniform":
        return ColorField(masses[:, None] * np.ones(K))
    if kind == "proportional_cosine":
        return ColorField(masses[:, None] * total)
    if kind == "cosine_step":
        cum = np.cumsum(total) / K
        edges = np.concatenate([[0], np.searchsorted(cum, np.cumsum(masses)[:-1] - 1e-12, side="left") + 1, [K]])
        vals = np.zeros((m, K))
        for c in range(m):
            vals[c, edges[c]:edges[c + 1]] = total[edges[c]:edges[c + 1]]
        return ColorField(vals)
    if kind == "smooth_cosine":
        frac = masses[:, None] * (1 + 0.5 * np.sin(2 * np.pi * (x[None, :] - np.arange(m)[:, None] / m)))
        frac /= frac.sum(axis=0)
        return ColorField(frac * total)
    raise ConfigError(f"unknown initial profile {kind!r}")


def realized_params(lam: float, fld: ColorField) -> ModelParams:
    masses = fld.masses()
    return ModelParams(lam, tuple(masses / masses.sum()))


# --- comparisons ---------------------------------------------------------------------

def smoothed_cell_averages(values: np.ndarray, K: int, bandwidth: float, sub: int = 64) -> np.ndarray:
    """Expected box-smoothed empirical field of a piecewise-constant density.

    ``values`` is ``(m, Kf)``; returns ``(m, K)`` cell averages of the density
    convolved with a box of width ``bandwidth``.
    """
    values = np.atleast_2d(values)
    m, Kf = values.shape
    edges = np.arange(Kf + 1) / Kf
    cum = np.concatenate([np.zeros((m, 1)), np.cumsum(values, axis=1) / Kf], axis=1)
    mass = cum[:, -1:]

    def M(y):
        # periodic cumulative mass, linear inside fine cells
        n = np.floor(y)
        r = y - n
        return np.stack([np.interp(r, edges, cum[c]) for c in range(m)]) + n * mass

    pts = (np.arange(K * sub) + 0.5) / (K * sub)
    dens = (M(pts + bandwidth / 2) - M(pts - bandwidth / 2)) / bandwidth
    return dens.reshape(m, K, sub).mean(axis=2)


def average_fields(records: list[RunRecord], K: int, bandwidth: float | None = None) -> FieldTrajectory:
    if not records:
        raise DomainError("no replicas to average")
    times = records[0].times
    for r in records[1:]:
        if r.times.shape != times.shape or np.max(np.abs(r.times - times)) > TIME_MATCH:
            raise DomainError("replicas disagree on snapshot times")
    frames = np.mean([r.fields(K, bandwidth).frames for r in records], axis=0)
    return FieldTrajectory(times, frames, {"replicas": len(records), "N": records[0].N})


def compare_sim_pde(runs, pde: FieldTrajectory, K: int | None = None, bandwidth: float | None = None) -> dict:
    """Per-time L1 and Linf distances per colour between averaged particle fields and the PDE.

    ``runs`` is a list of :class:`RunRecord` or an already averaged
    :class:`FieldTrajectory`.  The PDE field is smoothed with the same box
    kernel and binned on the same ``K`` cells as the particles.
    """
    if isinstance(runs, FieldTrajectory):
        sim = runs
        K = sim.K
        bandwidth = bandwidth or 1.0 / K
        if sim.K == pde.K:
            bandwidth = None
    else:
        K = K or 32
        bandwidth = bandwidth or 1.0 / K
        sim = average_fields(runs, K, bandwidth)
    idx = []
    for t in sim.times:
        j = int(np.argmin(np.abs(pde.times - t)))
        if abs(pde.times[j] - t) > TIME_MATCH:
            raise DomainError(f"no PDE frame at t={t}")
        idx.append(j)
    if sim.m != pde.m:
        raise DomainError("colour counts differ")
    l1 = np.empty((len(idx), sim.m))
    linf = np.empty_like(l1)
    for n, j in enumerate(idx):
        ref = pde.frames[j] if bandwidth is None else smoothed_cell_averages(pde.frames[j], K, bandwidth)
        diff = sim.frames[n] - ref
        l1[n] = np.abs(diff).sum(axis=1) / K
        linf[n] = np.abs(diff).max(axis=1)
    return {"times": sim.times.copy(), "l1": l1, "linf": linf}


def fit_variance_rate(times: np.ndarray, msd: np.ndarray) -> float:
    """Least-squares slope of ``msd`` against time over ``[T/2, T]``."""
    T = times[-1]
    sel = times >= T / 2 - 1e-12
    if sel.sum() < 2:
        raise DomainError("need at least two snapshots in [T/2, T]")
    return float(np.polyfit(times[sel], msd[sel], 1)[0])


def tagged_variance_check(runs: list[RunRecord], lam: float, tagged: int | None = None) -> dict:
    """Fitted variance rate of tagged displacements versus ``lam / (lam + 1)``.

    All labels are exchangeable at equilibrium, so by default every label is
    used as a tagged particle; ``tagged`` restricts to one label.
    """
    for r in runs:
        if r.config.get("initial") != "uniform":
            raise DomainError("tagged variance prediction needs the uniform equilibrium start")
    times = runs[0].times
    per_rep = []
    for r in runs:
        d = r.lifted - r.lifted[0]
        d = d[:, [tagged]] if tagged is not None else d
        per_rep.append((d**2).mean(axis=1))
    per_rep = np.array(per_rep)
    msd = per_rep.mean(axis=0)
    rate = fit_variance_rate(times, msd)
    slopes = np.array([fit_variance_rate(times, m) for m in per_rep])
    se = float(slopes.std(ddof=1) / math.sqrt(len(slopes))) if len(slopes) > 1 else math.inf
    predicted = lam / (lam + 1.0)
    return {"rate": rate, "predicted": predicted, "se": se, "rel_error": rate / predicted - 1.0,
            "times": times, "msd": msd}


# --- scenarios -------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    model: dict
    initial: dict = field(default_factory=lambda: {"kind": "uniform"})
    sim: dict | None = None
    pde: dict | None = None
    perturbation: dict | None = None
    replicas: int = 0
    seed: int = 0
    comparisons: list = field(default_factory=list)
    output_dir: str | None = None
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported scenario schema {self.schema}")
        if self.replicas < 0:
            raise ConfigError("replicas must be >= 0")
        for comp in self.comparisons:
            if comp.get("kind") not in COMPARISONS:
                raise ConfigError(f"unknown comparison {comp.get('kind')!r}")
        if self.sim is not None and self.pde is not None:
            K_sim = self.sim.get("field_K", 32)
            bw = self.sim.get("bandwidth", 1.0 / K_sim)
            if bw < 1.0 / self.pde.get("K", 256) - 1e-15:
                raise ConfigError("particle kernel bandwidth must be at least the PDE grid spacing")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = copy.deepcopy(d)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}")
        if "name" not in d or "model" not in d:
            raise ConfigError("scenario needs 'name' and 'model'")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_scenario(path) -> Scenario:
    """Read a TOML scenario file or a JSON manifest written by :func:`run_scenario`."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        data = data.get("scenario", data)
    else:
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse scenario: {exc}") from exc
    return Scenario.from_dict(data)


def builtin_scenarios() -> dict[str, dict]:
    return {
        "closure": {
            "name": "closure",
            "model": {"lam": 1.0, "color_masses": [0.5, 0.5]},
            "initial": {"kind": "cosine_step", "amplitude": 0.5},
            "pde": {"K": 256, "T": 0.25, "frames": 50},
            "comparisons": [{"kind": "closure", "max_linf": 1e-6}],
        },
        "rate_zero": {
            "name": "rate_zero",
            "model": {"lam": 1.0, "color_masses": [0.5, 0.5]},
            "initial": {"kind": "smooth_cosine", "amplitude": 0.5},
            "pde": {"K": 128, "T": 0.25, "frames": 200},
            "comparisons": [{"kind": "rate_zero", "max_rate": 1e-6}],
        },
        "rate_cost": {
            "name": "rate_cost",
            "model": {"lam": 1.0, "color_masses": [0.5, 0.5]},
            "initial": {"kind": "smooth_cosine", "amplitude": 0.5},
            "pde": {"K": 128, "T": 0.25, "frames": 100},
            "perturbation": {"kind": "sine_gradient", "amplitude": 0.2, "eta": 0.05, "ramp": 0.1},
            "comparisons": [{"kind": "rate_cost_match", "rel_tol": 0.02}],
        },
        "hydro_small": {
            "name": "hydro_small",
            "seed": 1,
            "replicas": 4,
            "model": {"lam": 1.0, "color_masses": [0.5, 0.5]},
            "initial": {"kind": "cosine_step", "amplitude": 0.5},
            "sim": {"N": 64, "c0": 0.1, "T": 0.05, "snapshots": 5, "field_K": 16},
            "pde": {"K": 128, "T": 0.05, "frames": 10},
            "comparisons": [{"kind": "sim_vs_pde", "max_l1": 0.25},
                            {"kind": "tightness", "eps": 0.2, "delta": 0.01, "max_fraction": 0.5}],
        },
        "tagged": {
            "name": "tagged",
            "seed": 2,
            "replicas": 4,
            "model": {"lam": 1.0, "color_masses": [1.0]},
            "initial": {"kind": "uniform"},
            "sim": {"N": 128, "c0": 0.1, "T": 0.01, "snapshots": 20},
            "comparisons": [{"kind": "tagged_variance", "rel_tol": 0.15}],
        },
        "replacement": {
            "name": "replacement",
            "seed": 3,
            "replicas": 4,
            "model": {"lam": 1.0, "color_masses": [0.5, 0.5]},
            "initial": {"kind": "uniform"},
            "sim": {"N": 64, "c0": 0.1, "T": 0.02, "snapshots": 2, "density_eps": 0.05},
            "comparisons": [{"kind": "replacement_residual", "c1": 0, "c2": 1, "max_residual": 0.05}],
        },
    }


def aligned_pde_config(K: int, T: float, params: ModelParams, frames: int, scheme: str = "explicit",
                       dt_target: float | None = None) -> PdeConfig:
    """Config whose stored frames fall exactly on ``T * j / frames``."""
    dt_target = 0.9 / K**2 if dt_target is None else dt_target
    n = max(int(math.ceil(T / dt_target / frames)), 1) * frames
    return PdeConfig(K=K, dt_pde=T / n, T=T, params=params, scheme=scheme, store_every=n // frames)


def _pde_config(sc: Scenario, params: ModelParams, snapshots: int | None = None) -> PdeConfig:
    p = sc.pde
    K = int(p.get("K", 256))
    T = float(p.get("T", sc.sim["T"] if sc.sim else 0.25))
    frames = int(p.get("frames", 50))
    if snapshots:
        frames = max(frames // snapshots, 1) * snapshots
    return aligned_pde_config(K, T, params, frames, p.get("scheme", "explicit"),
                              float(p["dt_pde"]) if "dt_pde" in p else None)


def hydro_limit_scenario(N: int, replicas: int = 32, c0: float = 0.1, T: float = 0.25, lam: float = 1.0,
                         seed: int = 11, field_K: int = 32, snapshots: int = 5, max_l1: float = 0.1) -> Scenario:
    """Particles against the colour system from a step colouring of a cosine total density."""
    return Scenario.from_dict({
        "name": f"hydro_N{N}",
        "seed": seed,
        "replicas": replicas,
        "model": {"lam": lam, "color_masses": [0.5, 0.5]},
        "initial": {"kind": "cosine_step", "amplitude": 0.5},
        "sim": {"N": N, "c0": c0, "T": T, "snapshots": snapshots, "field_K": field_K},
        "pde": {"K": 256, "T": T, "frames": 50},
        "comparisons": [{"kind": "sim_vs_pde", "max_l1": max_l1}],
    })


def _sim_config(sc: Scenario, params: ModelParams, init: ColorField, seed: int) -> SimConfig:
    s = dict(sc.sim)
    N = int(s.pop("N"))
    T = float(s.pop("T"))
    snaps = int(s.pop("snapshots", 1))
    c0 = s.pop("c0", None)
    dt_target = float(s.pop("dt")) if "dt" in s else float(c0 if c0 is not None else 0.1) / N**2
    n = max(int(math.ceil(T / dt_target / snaps)), 1) * snaps
    K_field = int(s.pop("field_K", 32))
    bw = s.pop("bandwidth", None)
    initial = "uniform" if sc.initial.get("kind") == "uniform" else init
    counts = partition_sizes(N, params.color_masses)
    return SimConfig(params=params, N=N, dt=T / n, T=T, seed=seed, initial=initial,
                     color_counts=counts, snapshot_every=n // snaps, frame_K=K_field,
                     frame_bandwidth=bw, **s)


def _versions() -> dict:
    import numba
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


@dataclass
class ScenarioResult:
    report: dict
    passed: bool
    tables: dict  # name -> (header, rows)


def run_scenario(sc: Scenario, out_dir=None, workers: int = 1, fmt: str = "csv") -> ScenarioResult:
    """Run every comparison of a scenario and write manifest, report and tables."""
    t_start = time.perf_counter()
    lam = float(sc.model["lam"])
    masses = sc.model.get("color_masses", [1.0])
    K_init = int(sc.pde["K"]) if sc.pde else 256
    init = initial_profile(sc.initial.get("kind", "uniform"), K_init, masses, float(sc.initial.get("amplitude", 0.5)))
    params = realized_params(lam, init)
    tables: dict = {}
    entries = []
    kinds = {c["kind"] for c in sc.comparisons}

    snaps = int(sc.sim.get("snapshots", 1)) if sc.sim else None
    pde = None
    control = None
    pert = None
    if sc.perturbation:
        pp = sc.perturbation
        if pp.get("kind") != "sine_gradient":
            raise ConfigError(f"unknown perturbation {pp.get('kind')!r}")
        control = GradientControl.sine(float(pp["amplitude"]), params.m, eta=float(pp.get("eta", 0.05)),
                                       ramp=float(pp.get("ramp", 0.1)), k=int(pp.get("k", 1)))
        pert = optimal_controls(control, params)
    if sc.pde and kinds & {"sim_vs_pde", "rate_zero", "rate_cost_match", "closure"}:
        cfg = _pde_config(sc, params, snaps if "sim_vs_pde" in kinds else None)
        pde = solve_perturbed_system(init, pert, cfg) if pert is not None else solve_colored_system(init, cfg)
        tables["pde_final"] = (["x"] + [f"rho_{c}" for c in range(pde.m)],
                               np.column_stack([cell_centers(pde.K), pde.frames[-1].T]))

    records: list[RunRecord] = []
    if sc.replicas > 0 and sc.sim:
        scfg = _sim_config(sc, params, init, sc.seed)
        records = simulate_replicas(scfg, sc.replicas, workers)

    for comp in sc.comparisons:
        kind = comp["kind"]
        entry = {"kind": kind}
        if kind == "closure":
            heat = solve_heat(init.total, cfg)
            dev = float(np.max(np.abs(pde.frames.sum(axis=1) - heat.frames[:, 0])))
            entry.update(value=dev, tolerance=comp.get("max_linf", 1e-6), units="density")
            entry["passed"] = dev <= entry["tolerance"]
        elif kind == "rate_zero":
            rep = dynamic_rate(pde, params)
            entry.update(value=rep.i_dyn, richardson=rep.i_dyn_richardson, tolerance=comp.get("max_rate", 1e-6),
                         units="rate")
            entry["passed"] = rep.feasible and rep.i_dyn <= entry["tolerance"]
            tables["rate_slices"] = (["t", "slice"], np.column_stack([rep.times, rep.slices]))
        elif kind == "rate_cost_match":
            if control is None:
                raise ConfigError("rate_cost_match needs a perturbation")
            rep = dynamic_rate(pde, params)
            cost = control_energy(pde, control, params)
            rel = abs(rep.i_dyn / cost - 1.0)
            entry.update(value=rel, i_dyn=rep.i_dyn, cost=cost, tolerance=comp.get("rel_tol", 0.02),
                         units="relative")
            entry["passed"] = rel <= entry["tolerance"]
        elif kind == "sim_vs_pde":
            if not records or pde is None:
                raise ConfigError("sim_vs_pde needs replicas and a pde block")
            res = compare_sim_pde(records, pde, K=records[0].config["frame_K"],
                                  bandwidth=records[0].config.get("frame_bandwidth"))
            final = res["l1"][-1]
            entry.update(value=final.tolist(), tolerance=comp.get("max_l1", 0.1), units="L1 per colour")
            entry["passed"] = bool(np.all(final <= entry["tolerance"]))
            rows = [[t, c, res["l1"][n, c], res["linf"][n, c]]
                    for n, t in enumerate(res["times"]) for c in range(res["l1"].shape[1])]
            tables["sim_vs_pde"] = (["t", "color", "l1", "linf"], np.array(rows, dtype=float))
        elif kind == "tagged_variance":
            res = tagged_variance_check(records, lam)
            entry.update(value=res["rate"], predicted=res["predicted"], se=res["se"],
                         rel_error=res["rel_error"], tolerance=comp.get("rel_tol", 0.05), units="variance/time")
            entry["passed"] = abs(res["rel_error"]) <= entry["tolerance"]
            tables["tagged_msd"] = (["t", "msd"], np.column_stack([res["times"], res["msd"]]))
        elif kind == "replacement_residual":
            c1, c2 = int(comp.get("c1", 0)), int(comp.get("c2", 0))
            vals = [replacement_residual(r, c1, c2, 0.0, r.times[-1]) for r in records]
            val = float(np.mean(vals))
            entry.update(value=val, tolerance=comp.get("max_residual", math.inf), units="time")
            entry["passed"] = val <= entry["tolerance"]
            tables["replacement_residual"] = (["replica", "residual"], np.column_stack([np.arange(len(vals)), vals]))
        elif kind == "tightness":
            vals = [tightness_statistic(r, float(comp["eps"]), float(comp["delta"])) for r in records]
            val = float(np.mean(vals))
            entry.update(value=val, tolerance=comp.get("max_fraction", 1.0), units="fraction")
            entry["passed"] = val <= entry["tolerance"]
        entry["passed"] = bool(entry["passed"])
        entries.append(entry)

    passed = all(e["passed"] for e in entries)
    report = {
        "scenario": sc.name,
        "passed": passed,
        "comparisons": entries,
        "replicas": len(records),
        "runtime_seconds": time.perf_counter() - t_start,
    }
    manifest = {
        "schema": SCHEMA_VERSION,
        "scenario": sc.to_dict(),
        "scenario_hash": sc.digest(),
        "seed": sc.seed,
        "workers": workers,
        "versions": _versions(),
        "replica_digests": [r.digest() for r in records],
        "dt_guard_ok": [r.manifest["dt_guard_ok"] for r in records[:1]],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io_mod.write_json(out / "manifest.json", manifest)
        io_mod.write_json(out / "report.json", report)
        for name, (header, rows) in tables.items():
            if fmt == "csv":
                io_mod.write_csv(out / f"{name}.csv", header, rows)
            else:
                io_mod.write_json(out / f"{name}.json", {"columns": header, "rows": np.asarray(rows).tolist()})
    return ScenarioResult(report, passed, tables)
