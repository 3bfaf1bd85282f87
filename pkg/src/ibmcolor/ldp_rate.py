"""Rate functionals: weighted H^-1 norms, dynamic rate, Sanov term, Girsanov cost."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .hydro_pde import Perturbation, colored_flux
from .model_core import (
    RHO_FLOOR,
    ColorField,
    DomainError,
    FieldTrajectory,
    ModelParams,
    energy_density_explicit,
    energy_density_matrix,
    face_divergence,
    face_mean,
    grad,
    onsager_matrix,
)

CG_RTOL = 1e-10
MEAN_TOLERANCE = 1e-8


def _lam(params) -> float:
    return params.lam if isinstance(params, ModelParams) else float(params)


def _face_onsager(rho: np.ndarray, lam: float) -> np.ndarray:
    rf = face_mean(rho)
    if np.any(rf <= 0):
        warnings.warn("zero density on a face; floored inside the mobility", RuntimeWarning, stacklevel=3)
        rf = np.maximum(rf, RHO_FLOOR)
    return onsager_matrix(rf, lam)


def weighted_operator(rho: np.ndarray, lam: float) -> sparse.csr_matrix:
    """Matrix of ``phi -> -div(A(rho_face) grad phi)`` on ``m K`` unknowns."""
    m, K = rho.shape
    dx = 1.0 / K
    Af = _face_onsager(rho, lam)
    k = np.arange(K)
    kp, km = (k + 1) % K, (k - 1) % K
    rows, cols, vals = [], [], []
    for c in range(m):
        for d in range(m):
            wr = Af[c, d] / dx**2
            wl = np.roll(wr, 1)
            rows += [c * K + k] * 3
            cols += [d * K + kp, d * K + k, d * K + km]
            vals += [-wr, wr + wl, -wl]
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(m * K, m * K))


@dataclass
class EllipticInfo:
    iterations: int
    residual: float
    mean_margin: float


def solve_weighted_elliptic(g: np.ndarray, rho: np.ndarray, lam: float, rtol: float = CG_RTOL,
                            scale: float | None = None):
    """Solve ``-div(A grad phi) = g`` by preconditioned conjugate gradients.

    Each component of ``g`` must have zero mean, relative to ``scale`` (by
    default the size of ``g``; pass the size of the terms that produced ``g``
    when it is a small difference).  Returns ``(phi, info)`` with ``phi``
    normalised to zero mean per component.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    m, K = g.shape
    if scale is None:
        scale = float(np.max(np.abs(g)))
    scale = max(scale, 1e-300)
    margin = float(np.max(np.abs(g.mean(axis=1)))) / scale
    if margin > MEAN_TOLERANCE:
        raise DomainError(f"each component of g needs zero mean (relative margin {margin:.2e})")
    if not np.any(g):
        return np.zeros_like(g), EllipticInfo(0, 0.0, margin)
    g = g - g.mean(axis=1, keepdims=True)
    L = weighted_operator(rho, lam)
    diag = L.diagonal()
    M = LinearOperator(L.shape, matvec=lambda v: v / diag)
    its = [0]

    def count(_):
        its[0] += 1

    b = g.ravel()
    phi, status = cg(L, b, rtol=rtol, atol=0.0, M=M, maxiter=20 * m * K, callback=count)
    if status > 0:
        warnings.warn(f"CG did not converge in {status} iterations", RuntimeWarning, stacklevel=2)
    phi = phi.reshape(m, K)
    phi -= phi.mean(axis=1, keepdims=True)
    res = float(np.linalg.norm(L @ phi.ravel() - b) / np.linalg.norm(b))
    return phi, EllipticInfo(its[0], res, margin)


def _norm_from_solution(phi: np.ndarray, g: np.ndarray, rho: np.ndarray, lam: float) -> float:
    """``2 <phi, g> - <phi, L phi>``: equals the norm with an error quadratic in the solver error."""
    K = g.shape[-1]
    dx = 1.0 / K
    L = weighted_operator(rho, lam)
    Lphi = (L @ phi.ravel()).reshape(phi.shape)
    return float(dx * (2.0 * np.sum(phi * g) - np.sum(phi * Lphi)))


def h_minus1_a_norm_sq(g, fld: ColorField | np.ndarray, params, return_info: bool = False):
    """``||g||^2_{-1,A(rho)} = sup_phi 2 <phi, g> - int grad phi^T A grad phi``.

    The supremum is attained at the solution of ``-div(A grad phi) = g``.
    """
    rho = fld.values if isinstance(fld, ColorField) else np.atleast_2d(np.asarray(fld, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if g.shape != rho.shape:
        raise DomainError("g and the density field must have the same shape")
    lam = _lam(params)
    phi, info = solve_weighted_elliptic(g, rho, lam)
    val = _norm_from_solution(phi, g, rho, lam) if np.any(g) else 0.0
    return (val, phi, info) if return_info else val


def uncolored_norm_sq(g, rho) -> float:
    """Single-density norm with weight ``rho`` by the explicit discrete flux solution.

    On faces the flux is ``q = C - G`` with ``G`` the running sum of ``g``;
    periodicity fixes ``C`` and the norm is ``sum dx q^2 / rho_face``.
    """
    g = np.asarray(g, dtype=float).ravel()
    rho = np.asarray(rho, dtype=float).ravel()
    K = g.size
    dx = 1.0 / K
    scale = max(float(np.max(np.abs(g))), 1e-300)
    if abs(g.mean()) / scale > MEAN_TOLERANCE:
        raise DomainError("g needs zero mean")
    g = g - g.mean()
    rf = face_mean(rho)
    if np.any(rf <= 0):
        warnings.warn("zero density on a face; floored", RuntimeWarning, stacklevel=2)
        rf = np.maximum(rf, RHO_FLOOR)
    G = dx * np.cumsum(g)
    C = np.sum(G / rf) / np.sum(1.0 / rf)
    q = C - G
    return float(dx * np.sum(q * q / rf))


# --- trajectories ----------------------------------------------------------------

@dataclass
class RateReport:
    i_dyn: float | None
    slices: np.ndarray
    times: np.ndarray
    residual: np.ndarray
    i_init: float = 0.0
    i_dyn_richardson: float | None = None
    iterations: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    mean_margins: list = field(default_factory=list)
    feasible: bool = True
    reason: str = ""

    @property
    def total(self) -> float | None:
        return None if self.i_dyn is None else self.i_init + self.i_dyn

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "reason": self.reason,
            "i_init": self.i_init,
            "i_dyn": self.i_dyn,
            "i_dyn_richardson": self.i_dyn_richardson,
            "n_slices": int(len(self.slices)),
            "max_cg_iterations": int(max(self.iterations, default=0)),
            "max_cg_residual": float(max(self.residual_norms, default=0.0)),
            "max_mean_margin": float(max(self.mean_margins, default=0.0)),
        }


def time_derivative(traj: FieldTrajectory) -> np.ndarray:
    """Centred differences inside, one-sided at the two ends (non-uniform times allowed)."""
    t = traj.times
    f = traj.frames
    if len(t) < 2:
        raise DomainError("need at least two frames for a time derivative")
    return np.gradient(f, t, axis=0, edge_order=1)


def rate_residual(traj: FieldTrajectory, params) -> np.ndarray:
    """``g = d_t rho - (1/2) div(D grad rho)`` frame by frame."""
    lam = _lam(params)
    dx = traj.dx
    dt_rho = time_derivative(traj)
    out = np.empty_like(dt_rho)
    for n in range(len(traj.times)):
        out[n] = dt_rho[n] - face_divergence(colored_flux(traj.frames[n], lam, dx), dx)
    return out


def _feasibility(traj: FieldTrajectory, params) -> str:
    if np.any(traj.frames < -1e-12):
        return "negativity"
    masses = traj.frames.sum(axis=2) * traj.dx
    if np.max(np.abs(masses - masses[0])) > 1e-8:
        return "mass"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        e = energy_functional(traj, params)
    if not np.isfinite(e):
        return "energy"
    return ""


def _trapezoid(values: np.ndarray, times: np.ndarray) -> float:
    if len(times) < 2:
        return 0.0
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(times)))


def _slices(traj: FieldTrajectory, params, store_residual: bool = True):
    lam = _lam(params)
    g_all = rate_residual(traj, params)
    sizes = np.max(np.abs(time_derivative(traj)), axis=(1, 2)) + np.max(np.abs(g_all), axis=(1, 2))
    vals = np.empty(len(traj.times))
    its, res, margins = [], [], []
    for n in range(len(traj.times)):
        rho = traj.frames[n]
        g = g_all[n]
        phi, info = solve_weighted_elliptic(g, rho, lam, scale=float(sizes[n]))
        vals[n] = 0.5 * (_norm_from_solution(phi, g, rho, lam) if np.any(g) else 0.0)
        its.append(info.iterations)
        res.append(info.residual)
        margins.append(info.mean_margin)
    return vals, g_all, its, res, margins


def dynamic_rate(traj: FieldTrajectory, params, rho0_reference: np.ndarray | None = None,
                 richardson: bool = True) -> RateReport:
    """``I_dyn = (1/2) int ||d_t rho - (1/2) div(D grad rho)||^2_{-1,A} dt``.

    Outside the admissible set (negative densities, lost mass, unbounded
    energy) a report with ``feasible=False`` and the violated condition is
    returned instead of an infinite value.
    """
    if len(traj.times) < 2:
        raise DomainError("dynamic_rate needs at least two frames")
    reason = _feasibility(traj, params)
    if reason:
        return RateReport(None, np.zeros(0), traj.times, np.zeros((0,) + traj.frames.shape[1:]),
                          feasible=False, reason=reason)
    vals, g_all, its, res, margins = _slices(traj, params)
    i_dyn = _trapezoid(vals, traj.times)
    rich = None
    if richardson and len(traj.times) >= 5 and (len(traj.times) - 1) % 2 == 0:
        coarse = FieldTrajectory(traj.times[::2], traj.frames[::2])
        v2, *_ = _slices(coarse, params)
        i2 = _trapezoid(v2, coarse.times)
        rich = i_dyn + (i_dyn - i2) / 3.0
    i_init = 0.0
    if rho0_reference is not None:
        i_init = sanov_initial_rate(traj.frames[0], rho0_reference)
    return RateReport(i_dyn, vals, traj.times, g_all, i_init=i_init, i_dyn_richardson=rich,
                      iterations=its, residual_norms=res, mean_margins=margins)


def uncolored_rate(traj: FieldTrajectory, params=None) -> float:
    """``(1/2) int ||d_t rho - (1/2) rho''||^2_{-1,rho} dt`` for one density."""
    if traj.m != 1:
        raise DomainError("uncolored_rate needs a single density")
    if len(traj.times) < 2:
        raise DomainError("uncolored_rate needs at least two frames")
    dx = traj.dx
    dt_rho = time_derivative(traj)
    vals = np.empty(len(traj.times))
    for n in range(len(traj.times)):
        rho = traj.frames[n, 0]
        g = dt_rho[n, 0] - face_divergence(0.5 * (np.roll(rho, -1) - rho) / dx, dx)
        vals[n] = 0.5 * uncolored_norm_sq(g, rho)
    return _trapezoid(vals, traj.times)


def sanov_initial_rate(q0, rho0) -> float:
    """Relative entropy ``int q log(q / rho)`` of two grid densities (``inf`` if not abs. continuous)."""
    q = np.asarray(q0, dtype=float).sum(axis=0) if np.ndim(q0) == 2 else np.asarray(q0, dtype=float)
    r = np.asarray(rho0, dtype=float).sum(axis=0) if np.ndim(rho0) == 2 else np.asarray(rho0, dtype=float)
    if q.shape != r.shape:
        raise DomainError("densities must live on the same grid")
    if np.any(q < 0) or np.any(r < 0):
        raise DomainError("densities must be non-negative")
    dx = 1.0 / q.size
    for name, v in (("q0", q), ("rho0", r)):
        if abs(v.sum() * dx - 1.0) > 1e-8:
            raise DomainError(f"{name} must have mass 1")
    if np.any((r == 0) & (q > 0)):
        return math.inf
    pos = q > 0
    return float(max(dx * np.sum(q[pos] * np.log(q[pos] / r[pos])), 0.0))


def _eval_pert(pert: Perturbation, t: float, x, rho):
    return pert.drift(t, x, rho), pert.gamma(t, x, rho)


def perturbation_cost(traj: FieldTrajectory, pert: Perturbation, params) -> float:
    """Girsanov cost ``(1/2) int int sum_c b_c^2 rho_c + (1/lam) sum_{c<d} gamma_cd^2 rho_c rho_d``."""
    lam = _lam(params)
    x = (np.arange(traj.K) + 0.5) / traj.K
    iu = np.triu_indices(traj.m, k=1)
    vals = np.empty(len(traj.times))
    for n, t in enumerate(traj.times):
        rho = traj.frames[n]
        b, G = _eval_pert(pert, t, x, rho)
        dens = np.sum(b * b * rho, axis=0)
        if traj.m > 1:
            pair = G[iu[0], iu[1]] ** 2 * rho[iu[0]] * rho[iu[1]]
            dens = dens + pair.sum(axis=0) / lam
        vals[n] = 0.5 * traj.dx * dens.sum()
    return _trapezoid(vals, traj.times)


# --- controls -----------------------------------------------------------------------

@dataclass
class GradientControl:
    """Per-colour potentials ``U_c(t, x)``; ``grad`` gives their space derivative.

    ``U`` and ``grad`` return arrays broadcastable to ``(m, len(x))``.  When
    ``grad`` is omitted a centred difference with step ``1e-6`` is used.
    """

    U: object
    grad: object = None
    m: int = 1

    def gradient(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            g = self.grad(t, x)
        else:
            h = 1e-6
            g = (np.asarray(self.U(t, x + h)) - np.asarray(self.U(t, x - h))) / (2 * h)
        return np.broadcast_to(np.asarray(g, dtype=float), (self.m,) + x.shape).copy()

    @classmethod
    def sine(cls, amplitude: float, m: int, eta: float = 0.05, ramp: float = 0.1, k: int = 1):
        """``U = amplitude e(t) sin(2 pi k x)`` for every colour, ``e`` a smooth switch at ``eta``."""
        from .hydro_pde import activation

        def U(t, x):
            return amplitude * activation(t, eta, ramp) * np.sin(2 * np.pi * k * np.asarray(x))

        def dU(t, x):
            return amplitude * activation(t, eta, ramp) * 2 * np.pi * k * np.cos(2 * np.pi * k * np.asarray(x))

        ctl = cls(U=U, grad=dU, m=m)
        ctl.eta = eta
        return ctl


def optimal_control_values(rho: np.ndarray, grad_u: np.ndarray, lam: float):
    """Pointwise optimisers of the Girsanov cost under ``b - Gamma rho / lam = grad U``.

    ``b_c = (lam dU_c + sum_k rho_k dU_k) / (lam + rho)`` and
    ``gamma_cd = lam (dU_d - dU_c) / (lam + rho)``.
    """
    rho = np.asarray(rho, dtype=float)
    grad_u = np.asarray(grad_u, dtype=float)
    tot = lam + rho.sum(axis=0)
    b = (lam * grad_u + np.sum(rho * grad_u, axis=0)) / tot
    G = lam * (grad_u[None, :] - grad_u[:, None]) / tot
    return b, G


def optimal_controls(control: GradientControl, params, eta: float | None = None) -> Perturbation:
    """Feedback perturbation realising the gradient control at least cost."""
    lam = _lam(params)
    m = control.m
    eta = getattr(control, "eta", 0.0) if eta is None else eta

    def b(t, x, rho):
        return optimal_control_values(rho, control.gradient(t, x), lam)[0]

    def Gamma(t, x, rho):
        return optimal_control_values(rho, control.gradient(t, x), lam)[1]

    return Perturbation(m=m, b=b, Gamma=Gamma if m > 1 else None, eta=eta,
                        meta={"control": "gradient"})


def control_energy(traj: FieldTrajectory, control: GradientControl, params) -> float:
    """``(1/2) int int grad U^T A(rho) grad U`` by direct quadrature on the frames."""
    lam = _lam(params)
    x = (np.arange(traj.K) + 0.5) / traj.K
    vals = np.empty(len(traj.times))
    for n, t in enumerate(traj.times):
        du = control.gradient(t, x)
        A = onsager_matrix(traj.frames[n], lam)
        vals[n] = 0.5 * traj.dx * np.einsum("ik,ijk,jk->", du, A, du)
    return _trapezoid(vals, traj.times)


def energy_functional(traj: FieldTrajectory, params, method: str = "explicit") -> float:
    """``int int grad rho^T chi A chi grad rho`` with centred space differences."""
    vals = np.empty(len(traj.times))
    for n in range(len(traj.times)):
        rho = traj.frames[n]
        if np.any(rho <= 0):
            warnings.warn("zero density floored in the energy", RuntimeWarning, stacklevel=2)
        g = grad(rho, traj.dx)
        if method == "matrix":
            dens = energy_density_matrix(g, rho, params)
        else:
            dens = energy_density_explicit(g, rho, params)
        vals[n] = traj.dx * dens.sum()
    return _trapezoid(vals, traj.times)


def tagged_drift_cost(q: FieldTrajectory, b) -> float:
    """``(1/2) int int b^2 q`` for a single density; ``b`` is ``b(t, x)`` or an ``(L, K)`` array."""
    if q.m != 1:
        raise DomainError("tagged_drift_cost needs a single density")
    x = (np.arange(q.K) + 0.5) / q.K
    vals = np.empty(len(q.times))
    for n, t in enumerate(q.times):
        bb = np.asarray(b(t, x) if callable(b) else b[n], dtype=float)
        vals[n] = 0.5 * q.dx * np.sum(bb * bb * q.frames[n, 0])
    return _trapezoid(vals, q.times)
