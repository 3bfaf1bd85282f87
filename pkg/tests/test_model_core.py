import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ibmcolor.model_core import (
    ColorField,
    DomainError,
    FieldTrajectory,
    ModelParams,
    SingularMobilityError,
    chi_matrix,
    circular_distance,
    diffusion_matrix,
    energy_density_explicit,
    energy_density_matrix,
    f_map,
    f_map_derivative,
    g_map,
    g_map_derivative,
    onsager_matrix,
    periodic_interp,
    tagged_generator_coeffs,
    wrap,
)

lams = st.floats(0.01, 100.0)
rho_vecs = st.integers(1, 5).flatmap(
    lambda m: arrays(np.float64, m, elements=st.floats(0.0, 10.0)))


def cosine_field(K=256, a=0.5, m=1):
    x = (np.arange(K) + 0.5) / K
    tot = 1 + a * np.cos(2 * np.pi * x)
    return ColorField(np.tile(tot / m, (m, 1)))


# --- parameters and geometry ---------------------------------------------------

def test_params_validation():
    ModelParams(1.0, (0.25, 0.75))
    with pytest.raises(DomainError):
        ModelParams(0.0)
    with pytest.raises(DomainError):
        ModelParams(1.0, (0.5, 0.4))
    with pytest.raises(DomainError):
        ModelParams(1.0, (1.0, 0.0))


@given(st.floats(-50, 50))
def test_wrap_range(x):
    y = wrap(x)
    assert 0.0 <= y < 1.0
    assert abs((x - y) - round(x - y)) < 1e-9


def test_circular_distance():
    assert circular_distance(0.05, 0.95) == pytest.approx(0.1)
    assert circular_distance(0.3, 0.3) == 0.0


# --- matrices ------------------------------------------------------------------------

def test_diffusion_examples():
    np.testing.assert_allclose(diffusion_matrix([1.0], 2.0), [[1.0]])
    np.testing.assert_allclose(diffusion_matrix([1.0, 1.0], 1.0), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]])
    np.testing.assert_allclose(diffusion_matrix([0.0, 0.0], 1.0), np.eye(2))


def test_onsager_examples():
    np.testing.assert_allclose(onsager_matrix([1.0, 1.0], 1.0), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]])
    np.testing.assert_allclose(onsager_matrix([0.7], 3.0), [[0.7]])
    np.testing.assert_allclose(onsager_matrix([2.0, 0.0], 1.0), [[2.0, 0.0], [0.0, 0.0]])


def test_chi_examples():
    np.testing.assert_allclose(chi_matrix([1.0, 1.0]), np.eye(2))
    np.testing.assert_allclose(chi_matrix([2.0, 4.0]), np.diag([0.5, 0.25]))
    with pytest.raises(SingularMobilityError):
        chi_matrix([1.0, 0.0])
    with pytest.warns(RuntimeWarning):
        assert chi_matrix([1.0, 0.0], regularize=True)[1, 1] > 1e11


def test_negative_density_rejected():
    with pytest.raises(DomainError):
        diffusion_matrix([1.0, -0.1], 1.0)


@given(rho_vecs.filter(lambda r: np.all(r > 1e-3)), lams)
def test_d_equals_a_chi(rho, lam):
    D, A, chi = diffusion_matrix(rho, lam), onsager_matrix(rho, lam), chi_matrix(rho)
    np.testing.assert_allclose(D, A @ chi, atol=1e-12, rtol=1e-12)
    np.testing.assert_allclose(A, A.T, atol=0)


@given(rho_vecs, lams)
def test_a_psd_and_column_sums(rho, lam):
    A = onsager_matrix(rho, lam)
    assert np.linalg.eigvalsh(A).min() >= -1e-12 * max(1.0, np.abs(A).max())
    # columns of D sum to one, columns of A to rho
    np.testing.assert_allclose(diffusion_matrix(rho, lam).sum(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(A.sum(axis=0), rho, rtol=1e-12, atol=1e-12)


def test_matrices_broadcast_over_grid():
    rho = np.random.default_rng(0).random((3, 10))
    D = diffusion_matrix(rho, 2.0)
    assert D.shape == (3, 3, 10)
    np.testing.assert_allclose(D[:, :, 4], diffusion_matrix(rho[:, 4], 2.0))


@given(st.integers(1, 4), lams, st.integers(0, 10_000))
def test_energy_density_paths_agree(m, lam, seed):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(0.1, 2.0, (m, 8))
    g = rng.normal(size=(m, 8))
    np.testing.assert_allclose(energy_density_matrix(g, rho, lam), energy_density_explicit(g, rho, lam),
                               rtol=1e-10)


# --- fields ----------------------------------------------------------------------

def test_color_field_masses():
    fld = ColorField.from_functions([lambda x: 0.5 + 0 * x, lambda x: 0.5 * (1 + np.cos(2 * np.pi * x))], 64)
    np.testing.assert_allclose(fld.masses(), [0.5, 0.5], atol=1e-14)
    assert fld.m == 2 and fld.K == 64


def test_trajectory_validation_and_interp():
    with pytest.raises(DomainError):
        FieldTrajectory([0.0, 0.0], np.zeros((2, 1, 4)))
    tr = FieldTrajectory([0.0, 1.0], np.stack([np.zeros((1, 4)), np.ones((1, 4))]))
    np.testing.assert_allclose(tr.at(0.25), 0.25)


def test_periodic_interp_at_centres():
    v = np.arange(8.0)
    np.testing.assert_allclose(periodic_interp(v, (np.arange(8) + 0.5) / 8), v)
    assert periodic_interp(v, 0.0) == pytest.approx(3.5)


# --- coordinate maps ---------------------------------------------------------------

def test_f_map_uniform_example():
    fld = ColorField(np.ones((1, 64)))
    assert f_map(fld, np.array([0.3]), 1.0)[0] == pytest.approx(0.55, abs=1e-14)
    assert g_map(fld, 0.55, 1.0) == pytest.approx(0.3, abs=1e-12)


def test_f_map_uniform_gradient():
    fld = ColorField(np.ones((1, 32)))
    x = np.linspace(0.01, 0.99, 50)
    h = 1e-6
    for lam in (0.5, 1.0, 7.0):
        fd = (f_map(fld, x + h, lam) - f_map(fld, x - h, lam)) / (2 * h)
        np.testing.assert_allclose(fd, 1.0, atol=1e-8)
        np.testing.assert_allclose(g_map_derivative(fld, x, lam), 1.0, atol=1e-12)


def test_f_map_large_lambda():
    fld = cosine_field(64)
    x = np.linspace(0, 1, 9)
    np.testing.assert_allclose(f_map(fld, x, 1e9), x, atol=1e-8)


def test_f_map_quasi_periodic():
    fld = cosine_field(64)
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(f_map(fld, x + 1.0, 2.0), f_map(fld, x, 2.0) + 1.0, atol=1e-12)


def test_f_map_derivative_matches_fd():
    fld = cosine_field(64)
    x = np.linspace(0.013, 0.987, 40)
    h = 1e-7
    fd = (f_map(fld, x + h, 1.5) - f_map(fld, x - h, 1.5)) / (2 * h)
    np.testing.assert_allclose(fd, f_map_derivative(fld, x, 1.5), atol=1e-6)


@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
def test_g_inverts_f(seed, lam):
    rng = np.random.default_rng(seed)
    K = 32
    vals = rng.uniform(0.1, 2.0, K)
    fld = ColorField(vals / vals.mean())
    x = rng.random(64)
    np.testing.assert_allclose(g_map(fld, f_map(fld, x, lam), lam), x, atol=1e-10)


def test_f_map_requires_unit_mass():
    with pytest.raises(DomainError):
        f_map(ColorField(2 * np.ones((1, 16))), np.array([0.1]), 1.0)


def test_tagged_coeffs_examples():
    fld = ColorField(np.ones((1, 16)))
    s, b = tagged_generator_coeffs(fld, 0.3, 1.0)
    assert (s, b) == pytest.approx((0.5, 0.0))
    s, b = tagged_generator_coeffs(fld, 0.3, 3.0)
    assert (s, b) == pytest.approx((0.75, 0.0))
    s, b = tagged_generator_coeffs(cosine_field(64), 0.2, 1e9)
    assert s == pytest.approx(1.0) and abs(b) < 1e-8
