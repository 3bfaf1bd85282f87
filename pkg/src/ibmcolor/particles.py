"""Monte-Carlo simulation of reflecting Brownian particles with label swaps.

Ignoring labels, the particles are independent Brownian motions on the
circle.  The simulator moves sorted *slots* with independent Gaussian
increments and lets labels ride on slots: a label keeps its slot (partial
reflection) unless a swap event along the pair local time exchanges it with
a neighbour.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernel
from .localtime import ESTIMATORS
from .model_core import ColorField, DomainError, FieldTrajectory, ModelParams, cell_centers, wrap

DT_GUARD_C0 = 0.1
SWAP_RULES = {"thinning": _kernel.THINNING, "poisson": _kernel.POISSON}


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    """Static description of one simulation run.

    ``initial`` is either ``"uniform"``, a :class:`ColorField` (one row: law of
    every particle; ``m`` rows: law of each colour class, each row carrying
    that colour's mass), or an explicit list of positions.
    """

    params: ModelParams
    N: int
    dt: float
    T: float
    seed: int = 0
    initial: object = "uniform"
    initial_colors: list | None = None
    color_counts: tuple[int, ...] | None = None
    estimator: str = "bridge"
    eps_band: float = 0.01
    swap_rule: str = "poisson"
    snapshot_every: int = 1
    density_eps: float = 0.0
    record_swaps: bool = False
    frame_K: int = 64
    frame_bandwidth: float | None = None
    tagged_index: int | None = None
    chunk_steps: int = 512

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("need N >= 2")
        if not self.dt > 0 or self.T < 0:
            raise ConfigError("dt must be positive and T non-negative")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.swap_rule not in SWAP_RULES:
            raise ConfigError(f"unknown swap rule {self.swap_rule!r}")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")
        if self.color_counts is None:
            self.color_counts = partition_sizes(self.N, self.params.color_masses)
        self.color_counts = tuple(int(c) for c in self.color_counts)
        if sum(self.color_counts) != self.N or len(self.color_counts) != self.params.m:
            raise ConfigError("color counts must sum to N with one entry per colour")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def dt_max(self) -> float:
        return DT_GUARD_C0 / self.N**2

    @property
    def dt_guard_ok(self) -> bool:
        return self.dt <= self.dt_max * (1 + 1e-12)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.to_dict()
        if isinstance(self.initial, ColorField):
            d["initial"] = {"field": self.initial.values.tolist()}
        elif not isinstance(self.initial, str):
            d["initial"] = [float(v) for v in self.initial]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["params"] = ModelParams(d["params"]["lam"], tuple(d["params"]["color_masses"]))
        init = d.get("initial", "uniform")
        if isinstance(init, dict):
            d["initial"] = ColorField(np.array(init["field"], dtype=float))
        if d.get("color_counts") is not None:
            d["color_counts"] = tuple(d["color_counts"])
        return cls(**d)


def partition_sizes(N: int, masses) -> tuple[int, ...]:
    """Colour class sizes close to ``N * mass`` summing to ``N`` (largest remainder)."""
    raw = np.asarray(masses, dtype=float) * N
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for k in order[: N - sizes.sum()]:
        sizes[k] += 1
    return tuple(int(s) for s in sizes)


# --- state -------------------------------------------------------------------

@dataclass
class ParticleSystemState:
    """Sorted slots carrying labels.

    ``slots`` are lifted positions in cyclic order (``slots[-1] < slots[0] + 1``);
    ``slot_label[k]`` is the label occupying slot ``k``.  A label's lifted
    coordinate is ``slots[slot] + winding[label]``.
    """

    slots: np.ndarray
    slot_label: np.ndarray
    colors: np.ndarray
    winding: np.ndarray
    beta: np.ndarray
    time: float = 0.0
    step_index: int = 0

    @property
    def N(self) -> int:
        return self.slots.size

    def label_slots(self) -> np.ndarray:
        inv = np.empty_like(self.slot_label)
        inv[self.slot_label] = np.arange(self.N)
        return inv

    @property
    def lifted(self) -> np.ndarray:
        """Unwrapped position of each label."""
        return self.slots[self.label_slots()] + self.winding

    @property
    def positions(self) -> np.ndarray:
        """Position on the circle of each label."""
        return wrap(self.lifted)

    def copy(self) -> "ParticleSystemState":
        return ParticleSystemState(
            self.slots.copy(), self.slot_label.copy(), self.colors.copy(),
            self.winding.copy(), self.beta.copy(), self.time, self.step_index,
        )


@dataclass
class LocalTimeLedger:
    """Accumulated local times.

    ``per_color[i, c]`` is the colour-resolved average collision time of label
    ``i``; the per-particle and total averages are derived from it so that the
    sum and mean identities hold exactly.  ``signed[i]`` is the net push on
    label ``i`` (collisions from its left minus collisions from its right).
    """

    per_color: np.ndarray
    signed: np.ndarray
    pair_slot: np.ndarray
    totals: np.ndarray  # raw pair local time, swap events, label exchanges
    swap_counts: np.ndarray
    density_integral: np.ndarray

    @classmethod
    def zeros(cls, N: int, m: int) -> "LocalTimeLedger":
        return cls(np.zeros((N, m)), np.zeros(N), np.zeros(N), np.zeros(3),
                   np.zeros((m, m), dtype=np.int64), np.zeros((N, m)))

    @property
    def per_particle(self) -> np.ndarray:
        return self.per_color.sum(axis=1)

    @property
    def total(self) -> float:
        return float(self.per_particle.mean())

    @property
    def raw_pair_time(self) -> float:
        return float(self.totals[0])

    @property
    def swap_events(self) -> int:
        return int(self.totals[1])

    def copy(self) -> "LocalTimeLedger":
        return LocalTimeLedger(*(np.copy(getattr(self, f)) for f in
                                 ("per_color", "signed", "pair_slot", "totals", "swap_counts",
                                  "density_integral")))


@dataclass
class SimStreams:
    """Independent random streams of one replica."""

    noise: np.random.Generator
    clock: np.random.Generator
    swap: np.random.Generator

    @classmethod
    def for_replica(cls, seed: int, replica: int = 0) -> tuple[np.random.Generator, "SimStreams"]:
        ss = np.random.SeedSequence(seed, spawn_key=(replica,))
        init, noise, clock, swap = (np.random.default_rng(s) for s in ss.spawn(4))
        return init, cls(noise, clock, swap)


def _sample_from_field(rng: np.random.Generator, values: np.ndarray, n: int) -> np.ndarray:
    K = values.size
    p = values / values.sum()
    cells = rng.choice(K, size=n, p=p)
    return (cells + rng.random(n)) / K


def init(config: SimConfig, rng: np.random.Generator | None = None) -> ParticleSystemState:
    """Initial state; labels ``0..N-1`` are coloured by contiguous blocks."""
    if rng is None:
        rng, _ = SimStreams.for_replica(config.seed)
    N, m = config.N, config.params.m
    colors = np.repeat(np.arange(m), config.color_counts).astype(np.int64)
    init_law = config.initial
    if isinstance(init_law, str):
        if init_law != "uniform":
            raise ConfigError(f"unknown initial law {init_law!r}")
        pos = rng.random(N)
    elif isinstance(init_law, ColorField):
        vals = init_law.values
        if np.any(vals < 0):
            raise ConfigError("initial density must be non-negative")
        mass = vals.sum() * init_law.dx
        if abs(mass - 1.0) > 1e-6:
            raise ConfigError(f"initial density not normalised (mass {mass})")
        if vals.shape[0] == 1:
            pos = _sample_from_field(rng, vals[0], N)
        elif vals.shape[0] == m:
            pos = np.empty(N)
            for c in range(m):
                idx = np.flatnonzero(colors == c)
                pos[idx] = _sample_from_field(rng, vals[c], idx.size)
        else:
            raise ConfigError("initial field must have 1 or m rows")
    else:
        pos = wrap(np.asarray(init_law, dtype=float))
        if pos.size != N:
            raise ConfigError("deterministic initial positions must have N entries")
        if config.initial_colors is not None:
            colors = np.asarray(config.initial_colors, dtype=np.int64)
    order = np.argsort(pos, kind="stable")
    return ParticleSystemState(
        slots=pos[order].copy(),
        slot_label=order.astype(np.int64),
        colors=colors,
        winding=np.zeros(N, dtype=np.int64),
        beta=np.zeros(N),
    )


_EMPTY_F = np.zeros((1, 1))


def _advance(state, ledger, config, streams, n_steps, log):
    """Run ``n_steps`` in place through the compiled kernel, in RNG chunks."""
    N, m = config.N, config.params.m
    est = ESTIMATORS[config.estimator]
    rule = SWAP_RULES[config.swap_rule]
    need_clock = rule == _kernel.POISSON and config.estimator == "bridge"
    done = 0
    while done < n_steps:
        S = min(config.chunk_steps, n_steps - done)
        noise = streams.noise.standard_normal((S, N))
        u1 = streams.clock.random((S, N)) if need_clock else _EMPTY_F
        u2 = streams.swap.random((S, N))
        cap = S * N if log is not None else 0
        lt = np.empty(cap)
        ll = np.empty(cap, dtype=np.int64)
        lr = np.empty(cap, dtype=np.int64)
        lc = np.empty(cap, dtype=np.int64)
        t0 = state.time
        nlog = _kernel.advance(
            state.slots, state.slot_label, state.colors, state.winding, state.beta,
            ledger.per_color, ledger.signed, ledger.pair_slot, ledger.totals,
            ledger.swap_counts, ledger.density_integral,
            noise, u1, u2,
            t0, config.dt, config.params.lam, m, est, config.eps_band, rule,
            config.density_eps, state.step_index,
            lt, ll, lr, lc,
        )
        if log is not None and nlog:
            log.append((lt[:nlog].copy(), ll[:nlog].copy(), lr[:nlog].copy(), lc[:nlog].copy()))
        done += S
        state.step_index += S
        state.time = state.step_index * config.dt


def step(state: ParticleSystemState, ledger: LocalTimeLedger, config: SimConfig,
         streams: SimStreams):
    """One time step; returns new ``(state, ledger, swap_events)``.

    ``swap_events`` rows are ``(time, left_label, right_label, n_events)``.
    """
    if not config.dt_guard_ok:
        warnings.warn(f"dt={config.dt} exceeds collision guard {config.dt_max:.3g}",
                      RuntimeWarning, stacklevel=2)
    new_state, new_ledger = state.copy(), ledger.copy()
    log: list = []
    one = replace(config, chunk_steps=1) if config.chunk_steps != 1 else config
    _advance(new_state, new_ledger, one, streams, 1, log)
    events = _concat_log(log)
    return new_state, new_ledger, events


def _concat_log(log) -> np.ndarray:
    if not log:
        return np.zeros((0, 4))
    t = np.concatenate([e[0] for e in log])
    cols = [np.concatenate([e[k] for e in log]).astype(float) for k in (1, 2, 3)]
    return np.column_stack([t] + cols)


# --- run records -------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    times: np.ndarray
    lifted: np.ndarray  # (L+1, N) per label
    colors: np.ndarray  # (N,)
    per_color: np.ndarray  # (L+1, N, m)
    signed: np.ndarray  # (L+1, N)
    beta: np.ndarray  # (L+1, N)
    totals: np.ndarray  # (L+1, 3)
    density_integral: np.ndarray | None  # (L+1, N, m)
    swap_counts: np.ndarray  # (m, m)
    pair_slot: np.ndarray  # (N,)
    swap_log: np.ndarray  # (E, 4)
    manifest: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.colors.size

    @property
    def m(self) -> int:
        return self.per_color.shape[2]

    @property
    def lam(self) -> float:
        return float(self.config["params"]["lam"])

    def positions(self, n: int) -> np.ndarray:
        return wrap(self.lifted[n])

    def color_counts(self) -> np.ndarray:
        """Particle count per colour per frame (labels never change colour)."""
        counts = np.bincount(self.colors, minlength=self.m)
        return np.tile(counts, (len(self.times), 1))

    def fields(self, K: int | None = None, bandwidth: float | None = None) -> FieldTrajectory:
        K = K or self.config.get("frame_K", 64)
        bw = bandwidth or self.config.get("frame_bandwidth") or 1.0 / K
        frames = np.array([
            empirical_color_field(self.positions(n), self.colors, self.m, K, bw).values
            for n in range(len(self.times))
        ])
        return FieldTrajectory(self.times, frames, {"source": "particles", "N": self.N})

    def adjusted(self, n: int) -> np.ndarray:
        return adjusted_positions(self.lifted[n], self.lam)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.lifted, self.colors, self.per_color, self.signed,
                    self.beta, self.totals, self.swap_counts, self.pair_slot, self.swap_log):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.density_integral is not None:
            h.update(np.ascontiguousarray(self.density_integral).tobytes())
        return h.hexdigest()


def simulate(config: SimConfig, replica: int = 0) -> RunRecord:
    """Run one replica; a deterministic function of ``(config, replica)``."""
    init_rng, streams = SimStreams.for_replica(config.seed, replica)
    state = init(config, init_rng)
    N, m = config.N, config.params.m
    ledger = LocalTimeLedger.zeros(N, m)
    if not config.dt_guard_ok:
        warnings.warn(f"dt={config.dt:.3g} exceeds collision guard {config.dt_max:.3g}",
                      RuntimeWarning, stacklevel=2)
    n_steps = config.n_steps
    marks = list(range(0, n_steps, config.snapshot_every)) + [n_steps]
    marks = sorted(set(marks))
    L = len(marks)
    rec = {
        "lifted": np.empty((L, N)), "per_color": np.empty((L, N, m)), "signed": np.empty((L, N)),
        "beta": np.empty((L, N)), "totals": np.empty((L, 3)),
    }
    dens = np.empty((L, N, m)) if config.density_eps > 0 else None
    log: list | None = [] if config.record_swaps else None
    for n, mark in enumerate(marks):
        if mark > state.step_index:
            _advance(state, ledger, config, streams, mark - state.step_index, log)
        rec["lifted"][n] = state.lifted
        rec["per_color"][n] = ledger.per_color
        rec["signed"][n] = ledger.signed
        rec["beta"][n] = state.beta
        rec["totals"][n] = ledger.totals
        if dens is not None:
            dens[n] = ledger.density_integral
    times = np.array(marks, dtype=float) * config.dt
    manifest = {
        "config": config.to_dict(),
        "replica": replica,
        "n_steps": n_steps,
        "dt_max": config.dt_max,
        "dt_guard_ok": config.dt_guard_ok,
    }
    return RunRecord(
        config=config.to_dict(), times=times, colors=state.colors.copy(),
        density_integral=dens, swap_counts=ledger.swap_counts.copy(),
        pair_slot=ledger.pair_slot.copy(), swap_log=_concat_log(log or []),
        manifest=manifest, **rec,
    )


def _simulate_job(args):
    cfg_dict, replica = args
    return simulate(SimConfig.from_dict(cfg_dict), replica)


def simulate_replicas(config: SimConfig, replicas: int, workers: int = 1) -> list[RunRecord]:
    """Independent replicas with derived seeds, returned in replica order."""
    if workers <= 1 or replicas <= 1:
        return [simulate(config, r) for r in range(replicas)]
    jobs = [(config.to_dict(), r) for r in range(replicas)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_simulate_job, jobs))


# --- diagnostics -------------------------------------------------------------

def empirical_color_field(positions, colors, m: int, K: int, bandwidth: float | None = None) -> ColorField:
    """Box-kernel smoothed empirical density of each colour on ``K`` cells.

    Each particle spreads mass ``1/N`` uniformly over an arc of length
    ``bandwidth`` centred on it; cell values are exact cell averages, so
    colour ``c`` integrates to ``|I_c| / N``.
    """
    dx = 1.0 / K
    h = dx if bandwidth is None else float(bandwidth)
    if h < dx * (1 - 1e-12):
        raise DomainError("bandwidth must be at least the grid spacing")
    if h > 1.0:
        raise DomainError("bandwidth must not exceed the circle length")
    pos = wrap(np.asarray(positions, dtype=float))
    colors = np.asarray(colors)
    N = pos.size
    edges = np.arange(K + 1) * dx
    out = np.zeros((m, K))
    for c in range(m):
        p = pos[colors == c]
        if p.size == 0:
            continue
        left = p - h / 2
        cum = np.zeros(K + 1)
        for shift in (-1.0, 0.0, 1.0):
            cum += np.clip((edges[None, :] + shift - left[:, None]) / h, 0.0, 1.0).sum(axis=0)
        out[c] = np.diff(cum) / (N * dx)
    return ColorField(out)


def local_density(positions, colors, i: int, c: int, eps: float) -> float:
    """Colour-``c`` band density around label ``i`` (label ``i`` itself excluded)."""
    pos = wrap(np.asarray(positions, dtype=float))
    N = pos.size
    d = wrap(pos - pos[i])
    d = np.minimum(d, 1.0 - d)
    mask = (np.asarray(colors) == c) & (d <= eps)
    mask[i] = False
    return float(mask.sum()) / (2 * N * eps)


def adjusted_positions(lifted, lam: float) -> np.ndarray:
    """``z_i = x_i + (1/(N(lam+1))) sum_{j != i} nu(x_j - x_i)`` for every label."""
    x = np.asarray(lifted, dtype=float)
    N = x.size
    rel = wrap(x[None, :] - x[:, None])
    np.fill_diagonal(rel, 0.0)
    return x + rel.sum(axis=1) / (N * (lam + 1.0))


def adjusted_process(state: ParticleSystemState, i: int, lam: float) -> float:
    x = state.lifted
    N = x.size
    rel = wrap(x - x[i])
    rel[i] = 0.0
    return float(x[i] + rel.sum() / (N * (lam + 1.0)))


def _frame_index(times: np.ndarray, t: float) -> int:
    if t < -1e-12 or t > times[-1] + 1e-12:
        raise DomainError(f"time {t} outside [0, {times[-1]}]")
    n = int(np.argmin(np.abs(times - t)))
    return n


def replacement_residual(rec: RunRecord, c1: int, c2: int, t1: float, t2: float) -> float:
    """``(1/N) sum_{i in I_c1} |int rho_eps,i^(c2) dt - [A_i,c2(t2) - A_i,c2(t1)]|``.

    The band width is the ``density_eps`` the record was produced with.
    """
    if rec.density_integral is None:
        raise DomainError("record carries no density integrals (density_eps = 0)")
    n1, n2 = _frame_index(rec.times, t1), _frame_index(rec.times, t2)
    idx = rec.colors == c1
    dens = rec.density_integral[n2, idx, c2] - rec.density_integral[n1, idx, c2]
    loc = rec.per_color[n2, idx, c2] - rec.per_color[n1, idx, c2]
    return float(np.abs(dens - loc).sum() / rec.N)


def tightness_statistic(rec: RunRecord, eps: float, delta: float) -> float:
    """Fraction of labels whose lifted path moves by ``>= eps`` within a window ``delta``."""
    if delta <= 0:
        return 1.0 if eps <= 0 else 0.0
    spacing = np.diff(rec.times)
    if spacing.size == 0 or spacing.max() > delta * (1 + 1e-9):
        raise DomainError("snapshot spacing is coarser than delta")
    x = rec.lifted
    L = len(rec.times)
    moved = np.zeros(rec.N, dtype=bool)
    for a in range(L):
        b = np.searchsorted(rec.times, rec.times[a] + delta * (1 + 1e-9), side="right")
        if b - a > 1:
            dev = np.abs(x[a + 1:b] - x[a]).max(axis=0)
            moved |= dev >= eps
    if eps <= 0:
        return 1.0
    return float(moved.mean())


def swap_rate_statistic(recs: list[RunRecord]) -> tuple[float, float]:
    """Swap events per unit accrued raw pair local time and its replica standard error."""
    ratios = np.array([r.totals[-1, 1] / r.totals[-1, 0] for r in recs if r.totals[-1, 0] > 0])
    events = sum(r.totals[-1, 1] for r in recs)
    time = sum(r.totals[-1, 0] for r in recs)
    se = ratios.std(ddof=1) / np.sqrt(ratios.size) if ratios.size > 1 else np.inf
    return float(events / time), float(se)


def record_to_json(rec: RunRecord) -> str:
    return json.dumps(rec.manifest, sort_keys=True)


def frame_grid(K: int) -> np.ndarray:
    return cell_centers(K)
