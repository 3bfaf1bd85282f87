"""Model parameters, grid fields and the closed-form coefficient maps.

Everything lives on the unit circle discretised by a uniform cell-centred
grid ``x_k = (k + 1/2) / K``.  Densities are stored as ``(m, K)`` arrays.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# floor applied inside reciprocals of densities (never to the densities themselves)
RHO_FLOOR = 1e-12


class DomainError(ValueError):
    """Input outside the domain where a formula is defined."""


class SingularMobilityError(DomainError):
    pass


@dataclass(frozen=True)
class ModelParams:
    lam: float
    color_masses: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        masses = tuple(float(c) for c in self.color_masses)
        object.__setattr__(self, "color_masses", masses)
        if not self.lam > 0:
            raise DomainError(f"lambda must be positive, got {self.lam}")
        if len(masses) < 1 or any(c <= 0 for c in masses):
            raise DomainError("color masses must be positive")
        if abs(sum(masses) - 1.0) > 1e-12:
            raise DomainError(f"color masses must sum to 1, got {sum(masses)}")

    @property
    def m(self) -> int:
        return len(self.color_masses)

    def to_dict(self) -> dict:
        return {"lam": self.lam, "color_masses": list(self.color_masses)}


def wrap(x):
    """Representative of ``x`` in [0, 1)."""
    y = np.mod(x, 1.0)
    # np.mod can return 1.0 for tiny negative inputs
    return np.where(y >= 1.0, 0.0, y)


def nu(u):
    """Lift ``nu(u) = u`` applied to the representative of ``u`` in [0, 1)."""
    return wrap(u)


def circular_distance(x, y):
    d = wrap(np.asarray(x) - np.asarray(y))
    return np.minimum(d, 1.0 - d)


def cell_centers(K: int) -> np.ndarray:
    return (np.arange(K) + 0.5) / K


def grad(values: np.ndarray, dx: float) -> np.ndarray:
    """Centred periodic difference along the last axis."""
    return (np.roll(values, -1, axis=-1) - np.roll(values, 1, axis=-1)) / (2 * dx)


def laplacian(values: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(values, -1, axis=-1) - 2 * values + np.roll(values, 1, axis=-1)) / dx**2


def face_mean(values: np.ndarray) -> np.ndarray:
    """Arithmetic mean on face k+1/2 (between cells k and k+1)."""
    return 0.5 * (values + np.roll(values, -1, axis=-1))


def face_diff(values: np.ndarray, dx: float) -> np.ndarray:
    """Difference quotient on face k+1/2."""
    return (np.roll(values, -1, axis=-1) - values) / dx


def face_divergence(flux: np.ndarray, dx: float) -> np.ndarray:
    """Cell divergence of a face flux array (face k+1/2 stored at index k)."""
    return (flux - np.roll(flux, 1, axis=-1)) / dx


@dataclass
class ColorField:
    """``m`` densities at the cell centres of a ``K``-cell periodic grid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise DomainError("ColorField values must be (m, K)")
        self.values = v

    @classmethod
    def from_functions(cls, funcs, K: int) -> "ColorField":
        x = cell_centers(K)
        return cls(np.array([np.broadcast_to(f(x), x.shape) for f in funcs], dtype=float))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def dx(self) -> float:
        return 1.0 / self.K

    @property
    def x(self) -> np.ndarray:
        return cell_centers(self.K)

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def masses(self) -> np.ndarray:
        return self.values.sum(axis=1) * self.dx

    def copy(self) -> "ColorField":
        return ColorField(self.values.copy())

    def interp_total(self, x) -> np.ndarray:
        """Periodic piecewise-linear interpolation of the total density."""
        return periodic_interp(self.total, x)


def periodic_interp(values: np.ndarray, x) -> np.ndarray:
    K = values.shape[-1]
    s = wrap(np.asarray(x, dtype=float)) * K - 0.5
    k0 = np.floor(s).astype(int)
    w = s - k0
    return (1 - w) * values[..., k0 % K] + w * values[..., (k0 + 1) % K]


@dataclass
class FieldTrajectory:
    times: np.ndarray
    frames: np.ndarray  # (L+1, m, K)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim == 2:
            self.frames = self.frames[:, None, :]
        if self.frames.ndim != 3 or self.frames.shape[0] != self.times.shape[0]:
            raise DomainError("frames must be (L+1, m, K) matching times")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise DomainError("times must be strictly increasing")

    @property
    def m(self) -> int:
        return self.frames.shape[1]

    @property
    def K(self) -> int:
        return self.frames.shape[2]

    @property
    def dx(self) -> float:
        return 1.0 / self.K

    def frame(self, n: int) -> ColorField:
        return ColorField(self.frames[n])

    def total(self) -> "FieldTrajectory":
        return FieldTrajectory(self.times, self.frames.sum(axis=1, keepdims=True), dict(self.meta))

    def subsample(self, every: int) -> "FieldTrajectory":
        idx = np.arange(0, len(self.times), every)
        if idx[-1] != len(self.times) - 1 and (len(self.times) - 1) % every == 0:
            idx = np.append(idx, len(self.times) - 1)
        return FieldTrajectory(self.times[idx], self.frames[idx], dict(self.meta))

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation in time, (m, K)."""
        if t <= self.times[0]:
            return self.frames[0]
        if t >= self.times[-1]:
            return self.frames[-1]
        n = np.searchsorted(self.times, t) - 1
        w = (t - self.times[n]) / (self.times[n + 1] - self.times[n])
        return (1 - w) * self.frames[n] + w * self.frames[n + 1]


# --- mobility matrices -------------------------------------------------------

def _check_rho(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise DomainError("densities must be non-negative")
    return rho


def diffusion_matrix(rho, params: ModelParams | float) -> np.ndarray:
    """``D_ij = (delta_ij lam + rho_i) / (lam + rho)``.

    ``rho`` may carry trailing axes (``(m, ...)``); the matrix axes come first.
    """
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    rho = _check_rho(rho)
    m = rho.shape[0]
    tot = lam + rho.sum(axis=0)
    eye = np.eye(m).reshape((m, m) + (1,) * (rho.ndim - 1))
    return (eye * lam + rho[:, None]) / tot


def onsager_matrix(rho, params: ModelParams | float) -> np.ndarray:
    """Symmetric mobility ``A_ij = (delta_ij lam rho_j + rho_i rho_j) / (lam + rho)``."""
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    rho = _check_rho(rho)
    m = rho.shape[0]
    tot = lam + rho.sum(axis=0)
    eye = np.eye(m).reshape((m, m) + (1,) * (rho.ndim - 1))
    return (eye * lam * rho[None, :] + rho[:, None] * rho[None, :]) / tot


def chi_matrix(rho, regularize: bool = False) -> np.ndarray:
    """Entropy Hessian ``diag(1 / rho_c)``.

    Raises :class:`SingularMobilityError` on a zero density unless
    ``regularize`` is set, in which case ``rho_c`` is floored at ``RHO_FLOOR``.
    """
    rho = _check_rho(rho)
    if np.any(rho == 0):
        if not regularize:
            raise SingularMobilityError("chi is singular at zero density")
        warnings.warn("zero density floored inside chi", RuntimeWarning, stacklevel=2)
        rho = np.maximum(rho, RHO_FLOOR)
    m = rho.shape[0]
    out = np.zeros((m, m) + rho.shape[1:])
    for c in range(m):
        out[c, c] = 1.0 / rho[c]
    return out


def mobility_matrices(rho, params: ModelParams | float):
    """Return ``(D, A, chi)`` at one density vector."""
    return diffusion_matrix(rho, params), onsager_matrix(rho, params), chi_matrix(rho)


def energy_density_matrix(grad_rho, rho, params) -> np.ndarray:
    """``grad_rho^T chi A chi grad_rho`` via the matrices, pointwise."""
    A = onsager_matrix(rho, params)
    w = grad_rho / np.maximum(rho, RHO_FLOOR)
    return np.einsum("i...,ij...,j...->...", w, A, w)


def energy_density_explicit(grad_rho, rho, params) -> np.ndarray:
    """Same quadratic form through its expanded closed form."""
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    tot = rho.sum(axis=0)
    gtot = grad_rho.sum(axis=0)
    return (gtot**2 + lam * np.sum(grad_rho**2 / np.maximum(rho, RHO_FLOOR), axis=0)) / (lam + tot)


# --- coordinate maps ---------------------------------------------------------

def _moments(total: np.ndarray, s) -> tuple[np.ndarray, np.ndarray]:
    """``int_0^s rho`` and ``int_0^s y rho(y) dy`` for ``s`` in [0, 2].

    ``rho`` is the periodic linear interpolant through the cell centres.
    """
    K = total.size
    h = 1.0 / K
    nodes = (np.arange(-1, 2 * K + 1) + 0.5) * h
    vals = np.resize(np.roll(total, 1), nodes.size)
    a, b = vals[:-1], vals[1:]
    t0 = nodes[:-1]
    seg0 = h * (a + b) / 2
    seg1 = seg0 * t0 + h**2 * (a + 2 * b) / 6
    cum0 = np.concatenate([[0.0], np.cumsum(seg0)])
    cum1 = np.concatenate([[0.0], np.cumsum(seg1)])

    def antideriv(u):
        j = np.clip(np.searchsorted(nodes, u, side="right") - 1, 0, nodes.size - 2)
        d = u - nodes[j]
        slope = (vals[j + 1] - vals[j]) / h
        part0 = vals[j] * d + slope * d**2 / 2
        part1 = nodes[j] * part0 + vals[j] * d**2 / 2 + slope * d**3 / 3
        return cum0[j] + part0, cum1[j] + part1

    z0, z1 = antideriv(np.zeros(1))
    c0, c1 = antideriv(np.asarray(s, dtype=float))
    return c0 - z0, c1 - z1


def _check_unit_mass(fld: ColorField, tol: float = 1e-8) -> np.ndarray:
    total = fld.total
    mass = total.sum() * fld.dx
    if abs(mass - 1.0) > tol:
        raise DomainError(f"coordinate map needs total mass 1, got {mass:.12g}")
    return total


def f_map(fld: ColorField, x, params: ModelParams | float) -> np.ndarray:
    """``F(x) = x + (1/(lam+1)) int nu(y - x) rho(y) dy`` on the lifted line.

    The density is the periodic piecewise-linear interpolant of the grid total,
    so ``dF/dx = (lam + rho(x)) / (lam + 1)`` holds exactly for that interpolant.
    """
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    total = _check_unit_mass(fld)
    x = np.asarray(x, dtype=float)
    base = np.floor(x)
    xr = x - base
    m0a, m1a = _moments(total, xr)
    m0b, m1b = _moments(total, xr + 1.0)
    integral = (m1b - m1a) - xr * (m0b - m0a)
    return x + integral / (lam + 1.0)


def f_map_derivative(fld: ColorField, x, params: ModelParams | float) -> np.ndarray:
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    return (lam + fld.interp_total(x)) / (lam + 1.0)


def g_map(fld: ColorField, y, params: ModelParams | float, tol: float = 1e-12) -> np.ndarray:
    """Inverse of :func:`f_map`, returned as a point of [0, 1).

    Bisection to bracket, then Newton polish with the closed-form derivative.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    f0 = f_map(fld, np.zeros(1), params)[0]
    shift = np.floor(y - f0)
    target = y - shift  # in [f0, f0 + 1)
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        below = f_map(fld, mid, params) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    x = 0.5 * (lo + hi)
    for _ in range(20):
        r = f_map(fld, x, params) - target
        if np.max(np.abs(r)) < tol:
            break
        x = np.clip(x - r / f_map_derivative(fld, x, params), lo, hi)
    x = wrap(x + shift)
    return x if x.size > 1 else x.reshape(np.shape(np.asarray(y)) or ())


def g_map_derivative(fld: ColorField, y, params: ModelParams | float) -> np.ndarray:
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    x = g_map(fld, y, params)
    return (lam + 1.0) / (lam + fld.interp_total(x))


def tagged_generator_coeffs(fld: ColorField, x, params: ModelParams | float):
    """Diffusion and drift of one tracked particle at ``x``.

    Returns ``(sigma2, drift)`` with ``sigma2 = lam / (lam + rho)`` (the SDE
    variance rate) and ``drift = -(2 lam + rho) rho' / (2 (lam + rho)^2)``.
    """
    lam = params.lam if isinstance(params, ModelParams) else float(params)
    total = fld.total
    rho = periodic_interp(total, x)
    drho = periodic_interp(grad(total, fld.dx), x)
    sigma2 = lam / (lam + rho)
    drift = -(2 * lam + rho) * drho / (2 * (lam + rho) ** 2)
    return sigma2, drift
