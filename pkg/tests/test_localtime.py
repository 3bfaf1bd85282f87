import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from ibmcolor.localtime import (
    band_increment,
    bridge_increment,
    bridge_scalar,
    erfcx_scalar,
    pair_bridge_both,
    pair_bridge_sample_scalar,
    pair_bridge_scalar,
    poisson_inverse,
    sample_bridge_local_time,
    swap_probability,
)


def occupation_mean(u, dt):
    """E[local time at 0 over dt] for a variance-2 Brownian motion started at u."""
    return integrate.quad(lambda s: math.exp(-u * u / (4 * s)) / math.sqrt(4 * math.pi * s), 0, dt)[0]


def transition(u, v, dt):
    return math.exp(-(v - u) ** 2 / (4 * dt)) / math.sqrt(4 * math.pi * dt)


@pytest.mark.parametrize("u", [0.0, 0.003, 0.01, 0.05])
def test_signed_bridge_mean_integrates_to_occupation(u):
    dt = 1e-4
    s = math.sqrt(2 * dt)
    f = lambda v: pair_bridge_scalar(u, v, dt) * transition(u, v, dt)  # noqa: E731
    lo, hi = u - 12 * s, u + 12 * s
    val = integrate.quad(f, lo, 0.0, limit=200)[0] + integrate.quad(f, 0.0, hi, limit=200)[0] if lo < 0 else \
        integrate.quad(f, lo, hi, limit=200)[0]
    assert val == pytest.approx(occupation_mean(u, dt), rel=1e-7, abs=1e-14)


@pytest.mark.parametrize("a", [0.0, 0.004, 0.02])
def test_unsigned_bridge_mean_integrates_to_occupation(a):
    dt = 1e-4
    s = math.sqrt(2 * dt)
    # |W| from a lands at b with density p(a, b) + p(a, -b)
    f = lambda b: bridge_scalar(a, b, dt) * (transition(a, b, dt) + transition(a, -b, dt))  # noqa: E731
    val = integrate.quad(f, 0.0, a + 12 * s, limit=200)[0]
    assert val == pytest.approx(occupation_mean(a, dt), rel=1e-7, abs=1e-14)


@given(st.floats(0, 0.05), st.floats(0, 0.05), st.floats(1e-7, 1e-3))
def test_unsigned_is_mixture_of_signed(a, b, dt):
    z = a * b / dt
    w = math.exp(-z) if z < 700 else 0.0
    mix = (pair_bridge_scalar(a, b, dt) + w * pair_bridge_scalar(a, -b, dt)) / (1 + w)
    assert bridge_scalar(a, b, dt) == pytest.approx(mix, rel=1e-10, abs=1e-300)
    assert bridge_increment(a, b, dt) == pytest.approx(bridge_scalar(a, b, dt), rel=1e-10, abs=1e-300)


@given(st.floats(0.0, 30.0))
def test_erfcx_scalar(s):
    from scipy.special import erfcx

    assert erfcx_scalar(s) == pytest.approx(erfcx(s), rel=2e-7)


def test_bridge_sample_mean_and_atom():
    rng = np.random.default_rng(5)
    dt, a, b = 1e-4, 0.004, 0.006
    u = rng.random(400_000)
    draws = sample_bridge_local_time(a, b, dt, u)
    assert (draws == 0).mean() == pytest.approx(math.tanh(a * b / (2 * dt)), abs=3e-3)
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - bridge_increment(a, b, dt)) < 4 * se


@pytest.mark.parametrize("v", [-0.01, 0.0, 0.008])
def test_pair_sample_mean(v):
    rng = np.random.default_rng(7)
    dt, u = 1e-4, 0.005
    r = rng.random(200_000)
    draws = np.array([pair_bridge_sample_scalar(u, v, dt, x) for x in r])
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - pair_bridge_scalar(u, v, dt)) < 4 * se + 1e-15
    if v < 0:
        assert np.all(draws > 0)


@given(st.floats(0, 0.05), st.floats(-0.05, 0.05), st.floats(1e-7, 1e-3), st.floats(0, 1))
def test_pair_both_consistent(u, v, dt, r):
    mean, draw = pair_bridge_both(u, v, dt, r)
    assert mean == pytest.approx(pair_bridge_scalar(u, v, dt), rel=1e-12, abs=1e-300)
    assert draw == pytest.approx(pair_bridge_sample_scalar(u, v, dt, r), rel=1e-12, abs=1e-300)
    assert draw >= 0


def test_band_increment():
    assert band_increment(0.5, 1e-6, 0.01) == 0.0
    assert band_increment(0.005, 1e-6, 0.01) == pytest.approx(1e-6 / 0.02)


def test_swap_probability_half():
    lam, N = 1.3, 17
    assert swap_probability(math.log(2) / (lam * N), lam, N) == pytest.approx(0.5, abs=1e-15)
    assert swap_probability(0.0, lam, N) == 0.0


@pytest.mark.parametrize("mu", [0.0, 0.3, 4.0])
def test_poisson_inverse_law(mu):
    u = (np.arange(20_000) + 0.5) / 20_000
    k = np.array([poisson_inverse(mu, x) for x in u])
    for j in range(6):
        assert (k <= j).mean() == pytest.approx(stats.poisson.cdf(j, mu), abs=1e-4)
