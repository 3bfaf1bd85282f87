"""Pair local-time increments over one time step.

The gap between two adjacent sorted particles behaves, over a short step,
like ``|W|`` with ``W`` a Brownian motion of variance rate 2.  The local time
is normalised with the one-sided delta of half mass at contact, so that
``A = lim (1/2e) int 1[0 <= gap <= e] dt``; for ``|W|`` this is the
occupation density of ``W`` at 0.

Given the gap ``a`` at the start and ``b`` at the end of a step of length
``dt``, the joint law of (local time, endpoint) of Brownian motion gives

* ``P(A = 0 | a, b) = tanh(ab / 2dt)``
* on ``A > 0``: ``2A + a + b = sqrt((a + b)^2 + 4 dt E)`` with ``E ~ Exp(1)``
* ``E[A | a, b] = sqrt(pi dt) erfcx((a + b) / 2 sqrt(dt)) / (1 + exp(ab / dt))``

When the sign of the end point is known (a free pair difference going from
``u >= 0`` to ``v``), a crossing forces ``A > 0`` and otherwise
``P(A > 0) = exp(-u v / dt)``; the law of ``A`` on ``A > 0`` is unchanged.
Since the unlabelled particles are independent Brownian motions, summing
these over free pairs gives the exact conditional expectation of the total
collision time for any step size.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.special import erfcx

BAND = 0
BRIDGE = 1
ESTIMATORS = {"band": BAND, "bridge": BRIDGE}


def band_increment(gap, dt: float, eps: float):
    """Occupation-band estimate ``dt * 1[gap <= eps] / (2 eps)``."""
    return dt * (np.asarray(gap) <= eps) / (2.0 * eps)


def bridge_increment(a, b, dt: float):
    """Expected pair local time conditioned on the step's end gaps."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = (a + b) / (2.0 * np.sqrt(dt))
    with np.errstate(over="ignore"):
        denom = 1.0 + np.exp(a * b / dt)
    return np.sqrt(np.pi * dt) * erfcx(s) / denom


def sample_bridge_local_time(a, b, dt: float, u) -> np.ndarray:
    """Exact conditional draw of the pair local time from one uniform ``u``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(over="ignore"):
        p_pos = 2.0 / (1.0 + np.exp(a * b / dt))
    hit = u < p_pos
    e = -np.log(np.where(hit, u / np.where(p_pos > 0, p_pos, 1.0), 1.0))
    c = a + b
    return np.where(hit, 0.5 * (np.sqrt(c * c + 4.0 * dt * e) - c), 0.0)


def swap_probability(delta_ell, lam: float, N: int):
    """Chance of at least one label-swap event, ``1 - exp(-lam N delta_ell)``."""
    return -np.expm1(-lam * N * np.asarray(delta_ell))


@njit(cache=True)
def erfcx_scalar(s):
    if s < 25.0:
        return math.erfc(s) * math.exp(s * s)
    inv = 1.0 / (s * s)
    series = 1.0 - 0.5 * inv * (1.0 - 1.5 * inv * (1.0 - 2.5 * inv * (1.0 - 3.5 * inv)))
    return series / (s * math.sqrt(math.pi))


@njit(cache=True)
def bridge_scalar(a, b, dt):
    z = a * b / dt
    if z > 700.0:
        return 0.0
    return math.sqrt(math.pi * dt) * erfcx_scalar((a + b) / (2.0 * math.sqrt(dt))) / (1.0 + math.exp(z))


@njit(cache=True)
def bridge_sample_scalar(a, b, dt, u):
    z = a * b / dt
    if z > 700.0:
        return 0.0
    p_pos = 2.0 / (1.0 + math.exp(z))
    if u >= p_pos:
        return 0.0
    e = -math.log(u / p_pos)
    c = a + b
    return 0.5 * (math.sqrt(c * c + 4.0 * dt * e) - c)


@njit(cache=True)
def pair_bridge_scalar(u, v, dt):
    """Expected local time at 0 of a difference bridge from ``u >= 0`` to signed ``v``."""
    av = abs(v)
    s = (u + av) / (2.0 * math.sqrt(dt))
    base = 0.5 * math.sqrt(math.pi * dt) * erfcx_scalar(s)
    if v < 0.0:
        return base
    z = u * av / dt
    if z > 700.0:
        return 0.0
    return base * math.exp(-z)


@njit(cache=True)
def pair_bridge_sample_scalar(u, v, dt, r):
    """Exact draw of the same local time from one uniform ``r``."""
    av = abs(v)
    if v >= 0.0:
        z = u * av / dt
        if z > 700.0:
            return 0.0
        p_pos = math.exp(-z)
        if r >= p_pos:
            return 0.0
        e = -math.log(r / p_pos) if r > 0.0 else 745.0
    else:
        e = -math.log(r) if r > 0.0 else 745.0
    c = u + av
    return 0.5 * (math.sqrt(c * c + 4.0 * dt * e) - c)


@njit(cache=True)
def pair_bridge_both(u, v, dt, r):
    """Mean and exact draw together, sharing the exponentials."""
    av = abs(v)
    c = u + av
    s = c / (2.0 * math.sqrt(dt))
    if v < 0.0:
        mean = 0.5 * math.sqrt(math.pi * dt) * erfcx_scalar(s)
        e = -math.log(r) if r > 0.0 else 745.0
        return mean, 0.5 * (math.sqrt(c * c + 4.0 * dt * e) - c)
    z = u * av / dt
    if z > 700.0:
        return 0.0, 0.0
    p_pos = math.exp(-z)
    mean = 0.5 * math.sqrt(math.pi * dt) * erfcx_scalar(s) * p_pos
    if r >= p_pos:
        return mean, 0.0
    e = -math.log(r / p_pos) if r > 0.0 else 745.0
    return mean, 0.5 * (math.sqrt(c * c + 4.0 * dt * e) - c)


@njit(cache=True)
def poisson_inverse(mu, u):
    """Poisson(mu) draw by CDF inversion."""
    if mu <= 0.0:
        return 0
    p = math.exp(-mu)
    cdf = p
    k = 0
    while u > cdf and k < 10000:
        k += 1
        p *= mu / k
        cdf += p
        if p == 0.0:
            break
    return k
