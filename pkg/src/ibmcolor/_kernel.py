"""Compiled inner loop of the particle simulator (one replica, many steps)."""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .localtime import BAND, pair_bridge_both, pair_bridge_scalar, poisson_inverse

THINNING = 0
POISSON = 1
GOLDEN = 0.6180339887498949  # decorrelates the uniform reused by non-adjacent pairs


@njit(cache=True)
def _insertion_sort(v):
    n = v.size
    for i in range(1, n):
        key = v[i]
        j = i - 1
        while j >= 0 and v[j] > key:
            v[j + 1] = v[j]
            j -= 1
        v[j + 1] = key


@njit(cache=True)
def resort_window(w, out):
    """Sorted lifted configuration with the same sum as ``w``.

    The reflecting system keeps its centre of mass equal to that of the free
    motions; among the windows of ``N`` consecutive points of the periodic
    set ``{w_k + n}`` exactly one has that sum.
    """
    n = w.size
    for i in range(n):
        out[i] = w[i]
    _insertion_sort(out)
    if out[n - 1] - out[0] < 1.0:
        return
    shift = 0
    r = np.empty(n)
    for i in range(n):
        f = math.floor(w[i])
        shift += int(f)
        r[i] = w[i] - f
    r.sort()
    for i in range(n):
        q = shift + i
        k = q % n
        out[i] = r[k] + (q - k) // n


@njit(cache=True)
def _gaps(x, g):
    n = x.size
    for k in range(n - 1):
        g[k] = x[k + 1] - x[k]
    g[n - 1] = x[0] + 1.0 - x[n - 1]


@njit(cache=True)
def _band_counts(x, slot_label, color, m, eps, counts):
    """Per-slot count of other particles of each colour within distance eps."""
    n = x.size
    for i in range(n):
        for c in range(m):
            counts[i, c] = 0.0
    if eps >= 0.5:
        for i in range(n):
            for j in range(n):
                if j != i:
                    counts[i, color[slot_label[j]]] += 1.0
        return
    for i in range(n):
        # walk right
        j = 1
        while j < n:
            k = i + j
            d = x[k % n] + (k // n) - x[i]
            if d > eps:
                break
            counts[i, color[slot_label[k % n]]] += 1.0
            j += 1
        jr = j
        j = 1
        while j < n - jr + 1:
            k = i - j
            d = x[i] - (x[k % n] + k // n)
            if d > eps:
                break
            counts[i, color[slot_label[k % n]]] += 1.0
            j += 1


@njit(cache=True)
def advance(
    x, slot_label, color, winding, beta,
    per_color, signed, pair_slot, totals,
    swap_cc, dens_int,
    noise, u1, u2,
    t0, dt, lam, m, estimator, eps_band, swap_rule, eps_density, step0,
    log_time, log_left, log_right, log_count,
):
    """Advance ``noise.shape[0]`` steps in place.

    Slots follow the sorted free motions and labels stay on their slot
    (reflection) unless the adjacent slot pair draws an odd number of swap
    events.  The bridge estimator sums the exact conditional local time of
    every nearby free pair; a pair that is not adjacent at the start of the
    step is credited to a middle slot pair.

    ``totals`` holds [accrued raw pair local time, swap events, label exchanges].
    Returns the number of swap-log rows written.
    """
    n = x.size
    nf = float(n)
    rate = lam * nf
    a = np.empty(n)
    w = np.empty(n)
    newx = np.empty(n)
    dl = np.empty(n)
    ell = np.empty(n)
    kcount = np.empty(n, dtype=np.int64)
    counts = np.zeros((n, m))
    nlog = 0
    cap = log_time.size
    sqdt = math.sqrt(dt)
    reach = 10.0 * sqdt
    zcut = 40.0
    npass = 3 if n % 2 == 1 else 2
    for s in range(noise.shape[0]):
        t = t0 + s * dt
        parity = (step0 + s) % 2
        _gaps(x, a)
        if eps_density > 0.0:
            _band_counts(x, slot_label, color, m, eps_density, counts)
            scale = dt / (2.0 * nf * eps_density)
            for i in range(n):
                lab = slot_label[i]
                for c in range(m):
                    dens_int[lab, c] += counts[i, c] * scale
        for i in range(n):
            xi = sqdt * noise[s, i]
            beta[slot_label[i]] += xi
            w[i] = x[i] + xi
            dl[i] = 0.0
            ell[i] = 0.0
        if estimator == BAND:
            for k in range(n):
                if a[k] <= eps_band:
                    dl[k] = dt / (2.0 * eps_band)
                    ell[k] = dl[k]
        else:
            for k in range(n):
                for d in range(1, n):
                    jj = k + d
                    lift = float(jj // n)
                    j = jj % n
                    u = x[j] + lift - x[k]
                    if u > reach:
                        break
                    v = w[j] + lift - w[k]
                    if v > 0.0 and u * v > zcut * dt:
                        continue
                    if swap_rule == POISSON:
                        r = u1[s, k]
                        if d > 1:
                            r = (r + (d - 1) * GOLDEN) % 1.0
                        mean, smp = pair_bridge_both(u, v, dt, r)
                    else:
                        mean = pair_bridge_scalar(u, v, dt)
                        smp = 0.0
                    half = (d - 1) // 2 if parity == 0 else d // 2
                    slot = (k + half) % n
                    dl[slot] += mean
                    ell[slot] += smp
        resort_window(w, newx)
        for i in range(n):
            x[i] = newx[i]
        for k in range(n):
            d = dl[k]
            kk = 0
            if swap_rule == THINNING:
                if d > 0.0 and u2[s, k] < -math.expm1(-rate * d):
                    kk = 1
            elif ell[k] > 0.0:
                kk = poisson_inverse(rate * ell[k], u2[s, k])
            kcount[k] = kk
            if d > 0.0:
                left = slot_label[k]
                right = slot_label[(k + 1) % n]
                per_color[left, color[right]] += d / nf
                per_color[right, color[left]] += d / nf
                signed[right] += d
                signed[left] -= d
                pair_slot[k] += d
                totals[0] += d
        # label exchanges: checkerboard passes, order alternates with step parity
        for p in range(npass):
            par = p if parity == 0 else npass - 1 - p
            for k in range(n):
                if n % 2 == 1:
                    cls = 2 if k == n - 1 else k % 2
                else:
                    cls = k % 2
                if cls != par or kcount[k] == 0:
                    continue
                kr = (k + 1) % n
                left = slot_label[k]
                right = slot_label[kr]
                totals[1] += kcount[k]
                swap_cc[color[left], color[right]] += kcount[k]
                if nlog < cap:
                    log_time[nlog] = t + dt
                    log_left[nlog] = left
                    log_right[nlog] = right
                    log_count[nlog] = kcount[k]
                    nlog += 1
                if kcount[k] % 2 == 1:
                    totals[2] += 1
                    slot_label[k] = right
                    slot_label[kr] = left
                    if kr == 0:
                        winding[right] -= 1
                        winding[left] += 1
    return nlog
