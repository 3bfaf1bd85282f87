"""Finite-volume solvers for the limit equations on the periodic grid.

All solvers share one flux-form update.  Face densities are arithmetic means
of the adjacent cells and the coefficient matrices are evaluated there, so
mass is conserved exactly and, because every column of ``D`` sums to one,
the colour fluxes add up to the heat flux identically (discrete closure).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.linalg import splu

from .model_core import (
    ColorField,
    DomainError,
    FieldTrajectory,
    ModelParams,
    cell_centers,
    diffusion_matrix,
    face_diff,
    face_divergence,
    face_mean,
    onsager_matrix,
)

SCHEMES = ("explicit", "semi_implicit")
CFL_SAFETY = 0.9
CLIP_TOLERANCE = 1e-10
NEG_TOLERANCE = 1e-12


class CFLError(ValueError):
    pass


class NegativeDensityError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class PdeConfig:
    """Grid and time stepping.  ``store_every`` is the frame cadence in steps."""

    K: int
    dt_pde: float
    T: float
    params: ModelParams
    scheme: str = "explicit"
    store_every: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}")
        if self.K < 4 or not self.dt_pde > 0 or self.T < 0:
            raise DomainError("need K >= 4, dt_pde > 0, T >= 0")
        if self.store_every < 1:
            raise DomainError("store_every must be >= 1")

    @property
    def dx(self) -> float:
        return 1.0 / self.K

    @property
    def n_steps(self) -> int:
        return max(int(np.ceil(self.T / self.dt_pde - 1e-9)), 1) if self.T > 0 else 0

    @property
    def dt(self) -> float:
        """Step actually used, ``T / n_steps`` (never above ``dt_pde``)."""
        return self.T / self.n_steps if self.n_steps else self.dt_pde

    @property
    def diffusive_limit(self) -> float:
        # 1/2 div(D grad) with eigenvalues of D at most 1
        return CFL_SAFETY * self.dx**2

    def to_dict(self) -> dict:
        return {"K": self.K, "dt_pde": self.dt_pde, "T": self.T, "scheme": self.scheme,
                "store_every": self.store_every, "params": self.params.to_dict()}

    @classmethod
    def auto(cls, K: int, T: float, params: ModelParams, scheme: str = "explicit",
             frames: int | None = None, fraction: float = 1.0) -> "PdeConfig":
        """Config at ``fraction`` of the explicit limit, storing about ``frames`` frames."""
        dt = fraction * CFL_SAFETY / K**2
        n = max(int(np.ceil(T / dt)), 1)
        every = 1 if frames is None else max(n // frames, 1)
        return cls(K=K, dt_pde=dt, T=T, params=params, scheme=scheme, store_every=every)


def activation(t, eta: float, ramp: float = 0.05):
    """Smooth switch: 0 for ``t <= eta``, 1 for ``t >= eta + ramp``, C-infinity between."""
    s = np.clip((np.asarray(t, dtype=float) - eta) / ramp, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        f = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        g = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return f / (f + g)


@dataclass
class Perturbation:
    """Per-colour drift ``b`` and skew swap bias ``Gamma``.

    ``b(t, x, rho)`` returns an ``(m, len(x))`` array and ``Gamma(t, x, rho)``
    an ``(m, m, len(x))`` array; ``rho`` is the ``(m, len(x))`` density at the
    same points, so feedback controls are allowed.  Either may be ``None``.
    Both must vanish for ``t <= eta``.
    """

    m: int
    b: object = None
    Gamma: object = None
    eta: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_functions(cls, b_funcs=None, gamma_funcs=None, eta: float = 0.0, m: int | None = None):
        """Build from per-colour callables ``f(t, x)`` and a nested list ``gamma_funcs[c][d]``."""
        if m is None:
            m = len(b_funcs) if b_funcs is not None else len(gamma_funcs)
        b = None
        if b_funcs is not None:
            def b(t, x, rho, _f=b_funcs):
                return np.array([np.broadcast_to(f(t, x), np.shape(x)) for f in _f], dtype=float)
        Gamma = None
        if gamma_funcs is not None:
            def Gamma(t, x, rho, _g=gamma_funcs):
                out = np.zeros((m, m) + np.shape(x))
                for c in range(m):
                    for d in range(m):
                        if _g[c][d] is not None:
                            out[c, d] = _g[c][d](t, x)
                return out
        return cls(m=m, b=b, Gamma=Gamma, eta=eta)

    def drift(self, t: float, x, rho) -> np.ndarray:
        if self.b is None or t <= self.eta:
            return np.zeros((self.m,) + np.shape(x))
        return np.asarray(self.b(t, x, rho), dtype=float)

    def gamma(self, t: float, x, rho) -> np.ndarray:
        if self.Gamma is None or t <= self.eta:
            return np.zeros((self.m, self.m) + np.shape(x))
        return np.asarray(self.Gamma(t, x, rho), dtype=float)

    @property
    def is_zero(self) -> bool:
        return self.b is None and self.Gamma is None

    def validate(self, n_samples: int = 7, K: int = 33):
        """Pointwise checks of skew symmetry and of the gating before ``eta``."""
        x = cell_centers(K)
        rho = np.full((self.m, K), 1.0 / self.m)
        times = np.linspace(0.0, max(self.eta, 0.0) + 1.0, n_samples)
        for t in times:
            if self.Gamma is not None:
                G = np.asarray(self.Gamma(t, x, rho), dtype=float)
                if G.shape != (self.m, self.m, K):
                    raise DomainError("Gamma must return an (m, m, K) array")
                if np.max(np.abs(G + np.swapaxes(G, 0, 1))) > 1e-12:
                    raise DomainError("Gamma must be skew-symmetric")
            if self.b is not None:
                B = np.asarray(self.b(t, x, rho), dtype=float)
                if B.shape != (self.m, K):
                    raise DomainError("b must return an (m, K) array")
        if self.eta > 0:
            for t in np.linspace(0.0, self.eta, n_samples):
                for fn in (self.b, self.Gamma):
                    if fn is not None and np.max(np.abs(fn(t, x, rho))) > 1e-12:
                        raise DomainError("perturbation must vanish for t <= eta")


# --- flux operators ------------------------------------------------------------

def colored_flux(rho: np.ndarray, lam: float, dx: float) -> np.ndarray:
    """Face flux ``(1/2) D(rho_face) grad rho`` for every colour, shape ``(m, K)``."""
    rf = face_mean(rho)
    g = face_diff(rho, dx)
    tot = lam + rf.sum(axis=0)
    # D g without forming the matrix: (lam g_c + rho_c sum_d g_d) / (lam + rho)
    return 0.5 * (lam * g + rf * g.sum(axis=0)) / tot


def drift_flux(rho: np.ndarray, lam: float, pert: Perturbation, t: float) -> np.ndarray:
    """Face flux ``A (b - Gamma rho / lam)`` at time ``t``."""
    K = rho.shape[1]
    xf = (np.arange(K) + 1.0) / K
    rf = face_mean(rho)
    b = pert.drift(t, xf, rf)
    G = pert.gamma(t, xf, rf)
    v = b - np.einsum("cdk,dk->ck", G, rf) / lam
    return np.einsum("cdk,dk->ck", onsager_matrix(rf, lam), v)


def colored_rhs(rho: np.ndarray, lam: float, dx: float) -> np.ndarray:
    """``(1/2) div(D grad rho)`` in flux form."""
    return face_divergence(colored_flux(rho, lam, dx), dx)


def _implicit_matrix(rho: np.ndarray, lam: float, dx: float, dt: float):
    """``I - dt L`` with ``L`` the colour-coupled diffusion frozen at ``rho``."""
    m, K = rho.shape
    rf = face_mean(rho)
    tot = lam + rf.sum(axis=0)
    Dface = diffusion_matrix(rf, lam)  # (m, m, K)
    rows, cols, vals = [], [], []
    k = np.arange(K)
    kp = (k + 1) % K
    km = (k - 1) % K
    coef = 0.5 * dt / dx**2
    for c in range(m):
        for d in range(m):
            wr = Dface[c, d]  # face k+1/2
            wl = np.roll(wr, 1)  # face k-1/2
            # L_cd rho_d at cell k: (wr (rho_{k+1} - rho_k) - wl (rho_k - rho_{k-1})) / dx^2
            rows += [c * K + k] * 3
            cols += [d * K + kp, d * K + k, d * K + km]
            vals += [-coef * wr, coef * (wr + wl), -coef * wl]
    M = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(m * K, m * K))
    return sparse.identity(m * K, format="csc") + M


def _max_speed(rho, lam, pert, t) -> float:
    if pert is None or pert.is_zero:
        return 0.0
    flux = drift_flux(rho, lam, pert, t)
    rf = np.maximum(face_mean(rho), 1e-300)
    return float(np.max(np.abs(flux) / rf))


def _check_initial(values: np.ndarray, tol: float = 1e-8):
    if np.any(values < -NEG_TOLERANCE):
        raise DomainError("initial density must be non-negative")
    mass = values.sum() / values.shape[1]
    if abs(mass - 1.0) > tol:
        raise DomainError(f"initial total mass must be 1, got {mass}")


def _clip(rho: np.ndarray, t: float, audit: dict) -> np.ndarray:
    neg = rho < 0
    if not neg.any():
        return rho
    clipped = -rho[neg].sum() / rho.shape[1]
    if rho.min() < -NEG_TOLERANCE and clipped > CLIP_TOLERANCE:
        k = np.unravel_index(np.argmin(rho), rho.shape)
        diag = {"time": t, "min": float(rho.min()), "color": int(k[0]), "cell": int(k[1]),
                "clipped_mass": float(clipped)}
        raise NegativeDensityError(f"negative density {rho.min():.3e} at t={t:.6g}", diag)
    masses = rho.sum(axis=1)
    out = np.maximum(rho, 0.0)
    new = out.sum(axis=1)
    scale = np.where(new > 0, masses / np.where(new > 0, new, 1.0), 1.0)
    audit["clipped_mass"] = audit.get("clipped_mass", 0.0) + float(clipped)
    return out * scale[:, None]


def _march(rho0: np.ndarray, config: PdeConfig, rhs_flux, pert: Perturbation | None = None,
           label: str = "") -> FieldTrajectory:
    """Shared time loop; ``rhs_flux(rho, t)`` returns the explicit face flux."""
    lam = config.params.lam
    dx = config.dx
    n = config.n_steps
    dt = config.dt
    if config.scheme == "explicit" and dt > config.diffusive_limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.3e} exceeds explicit limit {config.diffusive_limit:.3e}")
    rho = np.array(rho0, dtype=float)
    masses0 = rho.sum(axis=1) * dx
    times = [0.0]
    frames = [rho.copy()]
    audit = {"max_mass_drift_per_step": 0.0, "clipped_mass": 0.0, "max_cfl_advective": 0.0}
    for s in range(n):
        t = s * dt
        if pert is not None and not pert.is_zero:
            speed = _max_speed(rho, lam, pert, t)
            cfl = speed * dt / dx
            audit["max_cfl_advective"] = max(audit["max_cfl_advective"], cfl)
            if cfl > CFL_SAFETY:
                raise CFLError(f"advective CFL {cfl:.3f} exceeds {CFL_SAFETY} at t={t:.4g}")
        before = rho.sum(axis=1) * dx
        flux = rhs_flux(rho, t)
        if config.scheme == "explicit":
            rho = rho + dt * face_divergence(flux, dx)
        else:
            # diffusion implicit with coefficients frozen at the current state,
            # the remaining flux (drift) explicit
            extra = flux - colored_flux(rho, lam, dx)
            rhs = rho + dt * face_divergence(extra, dx)
            lu = splu(_implicit_matrix(rho, lam, dx, dt))
            rho = lu.solve(rhs.ravel()).reshape(rho.shape)
        rho = _clip(rho, t + dt, audit)
        after = rho.sum(axis=1) * dx
        audit["max_mass_drift_per_step"] = max(audit["max_mass_drift_per_step"],
                                               float(np.max(np.abs(after - before))))
        if (s + 1) % config.store_every == 0 or s + 1 == n:
            times.append((s + 1) * dt)
            frames.append(rho.copy())
    meta = {
        "solver": label,
        "grid": {"K": config.K, "dx": dx},
        "scheme": config.scheme,
        "dt": dt,
        "n_steps": n,
        "cfl_diffusive": dt / dx**2,
        "masses0": masses0.tolist(),
        "conservation": audit,
    }
    return FieldTrajectory(np.array(times), np.array(frames), meta)


def _as_values(initial) -> np.ndarray:
    if isinstance(initial, ColorField):
        return initial.values
    v = np.asarray(initial, dtype=float)
    return v[None, :] if v.ndim == 1 else v


@njit(cache=True)
def _heat_kernel(rho, dt, dx, n, every):
    # same operation order as the flux-form update in _march
    K = rho.shape[0]
    n_frames = n // every + (1 if n % every else 0)
    frames = np.empty((n_frames, K))
    flux = np.empty(K)
    drift = 0.0
    f = 0
    for s in range(n):
        before = rho.sum() * dx
        for k in range(K):
            flux[k] = 0.5 * ((rho[(k + 1) % K] - rho[k]) / dx)
        new = np.empty(K)
        for k in range(K):
            new[k] = rho[k] + dt * ((flux[k] - flux[k - 1]) / dx)
        rho = new
        drift = max(drift, abs(rho.sum() * dx - before))
        if (s + 1) % every == 0 or s + 1 == n:
            frames[f] = rho
            f += 1
    return frames, drift


def _heat_explicit(rho0: np.ndarray, config: PdeConfig) -> FieldTrajectory:
    n, every, dt, dx = config.n_steps, config.store_every, config.dt, config.dx
    frames, drift = _heat_kernel(np.array(rho0[0], dtype=float), dt, dx, n, every)
    if frames.min() < -NEG_TOLERANCE:
        raise NegativeDensityError("negative density in heat solve", {"min": float(frames.min())})
    steps = [s + 1 for s in range(n) if (s + 1) % every == 0 or s + 1 == n]
    meta = {
        "solver": "heat",
        "grid": {"K": config.K, "dx": dx},
        "scheme": config.scheme,
        "dt": dt,
        "n_steps": n,
        "cfl_diffusive": dt / dx**2,
        "masses0": (rho0.sum(axis=1) * dx).tolist(),
        "conservation": {"max_mass_drift_per_step": float(drift), "clipped_mass": 0.0, "max_cfl_advective": 0.0},
    }
    times = np.array([0.0] + [s * dt for s in steps])
    return FieldTrajectory(times, np.concatenate([rho0, frames])[:, None, :], meta)


def solve_heat(initial, config: PdeConfig) -> FieldTrajectory:
    """``d_t rho = (1/2) rho''`` from a density of mass one."""
    rho0 = _as_values(initial).sum(axis=0, keepdims=True)
    _check_initial(rho0)
    dx = config.dx
    if config.scheme == "explicit":
        if config.dt > config.diffusive_limit * (1 + 1e-12):
            raise CFLError(f"dt={config.dt:.3e} exceeds explicit limit {config.diffusive_limit:.3e}")
        return _heat_explicit(rho0, config)
    # with one colour the coupled diffusion is exactly the heat operator
    return _march(rho0, config, lambda rho, t: colored_flux(rho, config.params.lam, dx), label="heat")


def solve_colored_system(initial, config: PdeConfig) -> FieldTrajectory:
    """Quasi-linear colour system ``d_t rho = (1/2) div(D(rho) grad rho)``."""
    rho0 = _as_values(initial)
    _check_initial(rho0)
    lam, dx = config.params.lam, config.dx
    return _march(rho0, config, lambda rho, t: colored_flux(rho, lam, dx), label="colored_system")


def solve_perturbed_system(initial, pert: Perturbation, config: PdeConfig) -> FieldTrajectory:
    """Driven system ``d_t rho = (1/2) div(D grad rho) - div(A (b - Gamma rho / lam))``.

    With a zero perturbation this runs the same code path as
    :func:`solve_colored_system`.
    """
    rho0 = _as_values(initial)
    _check_initial(rho0)
    if pert.m != rho0.shape[0]:
        raise DomainError("perturbation and initial field disagree on m")
    pert.validate()
    lam, dx = config.params.lam, config.dx
    if pert.is_zero:
        return solve_colored_system(rho0, config)

    def flux(rho, t):
        return colored_flux(rho, lam, dx) - drift_flux(rho, lam, pert, t)

    traj = _march(rho0, config, flux, pert=pert, label="perturbed_system")
    traj.meta["eta"] = pert.eta
    return traj


def solve_colored_linear(initial_colors, background: FieldTrajectory, config: PdeConfig) -> FieldTrajectory:
    """Colours transported in a given total density ``rho(t)``.

    ``d_t rho_c = (1/2) div[(lam/(lam+rho)) grad rho_c + (grad rho/(lam+rho)) rho_c]``;
    the background is interpolated linearly in time between its frames.
    """
    rho0 = _as_values(initial_colors)
    if background.m != 1 or background.K != rho0.shape[1]:
        raise DomainError("background must be a single density on the same grid")
    if np.max(np.abs(rho0.sum(axis=0) - background.frames[0, 0])) > 1e-10:
        raise DomainError("initial colours do not sum to the background at t=0")
    if np.any(rho0 < -NEG_TOLERANCE):
        raise DomainError("initial colours must be non-negative")
    lam, dx = config.params.lam, config.dx

    def flux(rho, t):
        bg = background.at(t)[0]
        bf = face_mean(bg)
        gb = face_diff(bg, dx)
        return 0.5 * (lam * face_diff(rho, dx) + face_mean(rho) * gb) / (lam + bf)

    if config.scheme != "explicit":
        raise DomainError("solve_colored_linear supports the explicit scheme only")
    return _march(rho0, config, flux, label="colored_linear")


def drift_diffusion_reference(initial, b_func, config: PdeConfig) -> FieldTrajectory:
    """Scalar ``d_t rho = (1/2) rho'' - (b rho)'`` with the same face rules."""
    rho0 = _as_values(initial).sum(axis=0, keepdims=True)
    dx = config.dx
    xf = (np.arange(config.K) + 1.0) / config.K

    def flux(rho, t):
        return 0.5 * face_diff(rho, dx) - b_func(t, xf) * face_mean(rho)

    return _march(rho0, config, flux, label="drift_diffusion")


def heat_mode(x, t, amplitude: float = 0.5, k: int = 1):
    """Closed-form heat solution ``1 + a exp(-2 pi^2 k^2 t) cos(2 pi k x)``."""
    return 1.0 + amplitude * np.exp(-2 * np.pi**2 * k**2 * t) * np.cos(2 * np.pi * k * x)
