import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmdyn.bath import OhmicFamily, Tabulated
from nmdyn.chain import (
    ChainCoefficients, chain_propagate_one_excitation, gauss_discretize, monic_polynomials,
    recurrence_coefficients, star_propagate_one_excitation, star_to_chain, stieltjes,
)
from nmdyn.core import TimeGrid
from nmdyn.exact import one_excitation_amplitude

FLAT = Tabulated(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


def flat_kernel(eta, wc, omega_s):
    """Rotating-frame T = 0 kernel of ``J = eta`` on ``[0, wc]``."""

    def alpha(t):
        t = np.asarray(t, dtype=float)
        small = np.abs(t) < 1e-8
        ts = np.where(small, 1.0, t)
        val = eta * (1 - np.exp(-1j * wc * ts)) / (1j * ts)
        val = np.where(small, eta * wc * (1 - 0.5j * wc * t), val)
        return val * np.exp(1j * omega_s * t)

    return alpha


def test_flat_weight_is_shifted_legendre():
    c = recurrence_coefficients(FLAT, 21)
    n = np.arange(1, 21)
    assert np.max(np.abs(c.alphas[:21] - 0.5)) < 1e-12
    assert np.max(np.abs(c.betas[1:21] - n**2 / (4 * (4 * n**2 - 1)))) < 1e-10
    assert abs(c.betas[0] - 1.0) < 1e-12


def test_stieltjes_on_discrete_measure_orthogonality():
    rng = np.random.default_rng(3)
    x = np.sort(rng.random(60))
    w = rng.random(60)
    a, b = stieltjes(x, w, 8)
    pis = monic_polynomials(ChainCoefficients(a, b), x, 7)
    gram = (pis * w) @ pis.T
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-10 * np.max(np.diag(gram))
    # norms follow the products of the betas
    assert np.allclose(np.diag(gram), np.cumprod(b), rtol=1e-8)


def test_gauss_weights_and_moments():
    J = OhmicFamily(s=1.0, eta=0.3, omega_c=2.0, cutoff_shape="hard")
    star = gauss_discretize(recurrence_coefficients(J, 10))
    total = 0.3 * 2.0**2 / 2
    assert abs(star.weights.sum() / total - 1) < 1e-10
    flat = gauss_discretize(recurrence_coefficients(FLAT, 10))
    for k in range(20):
        exact = 1.0 / (k + 1)
        assert abs(np.sum(flat.weights * flat.nodes**k) / exact - 1) < 1e-8


@given(st.floats(0.2, 3.0), st.floats(0.01, 2.0))
def test_gauss_moments_scale_with_cutoff(wc, eta):
    J = OhmicFamily(s=1.0, eta=eta, omega_c=wc, cutoff_shape="hard")
    star = gauss_discretize(recurrence_coefficients(J, 6))
    for k in range(12):
        exact = eta * wc ** (k + 2) / (k + 2)
        assert abs(np.sum(star.weights * star.nodes**k) / exact - 1) < 1e-8


def test_star_and_chain_agree():
    J = OhmicFamily(s=1.0, eta=0.05, omega_c=1.0, cutoff_shape="hard")
    coeffs = recurrence_coefficients(J, 40)
    grid = TimeGrid.from_span(20.0, 0.05)
    star = star_propagate_one_excitation(0.5, gauss_discretize(coeffs), grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        chain = chain_propagate_one_excitation(0.5, star_to_chain(coeffs), 40, grid)
    assert np.max(np.abs(star.A - chain.A)) < 1e-10
    assert star.norm_error < 1e-10 and chain.norm_error < 1e-10


def test_chain_matches_volterra_until_recurrence():
    eta, omega_s = 0.02, 0.5
    J = Tabulated(np.array([0.0, 1.0]), np.array([eta, eta]))
    grid = TimeGrid.from_span(50.0, 0.05)
    chain = chain_propagate_one_excitation(omega_s, star_to_chain(recurrence_coefficients(J, 200)), 200, grid)
    fine = TimeGrid.from_span(50.0, 0.01)
    ref = one_excitation_amplitude(flat_kernel(eta, 1.0, omega_s), fine, omega_s).A[::5]
    valid = grid.times < min(chain.recurrence_time, grid.t_final + 1)
    assert valid.sum() > 100
    assert np.max(np.abs(chain.A[valid] - ref[valid])) < 1e-3


def test_short_chain_warns_about_reflection():
    coeffs = recurrence_coefficients(FLAT, 10)
    with pytest.warns(RuntimeWarning):
        amp = chain_propagate_one_excitation(0.5, star_to_chain(coeffs), 10, TimeGrid.from_span(200.0, 0.5))
    assert np.isfinite(amp.recurrence_time)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        recurrence_coefficients(FLAT, 0)
    with pytest.raises(ValueError):
        ChainCoefficients(np.array([0.5]), np.array([-1.0]))
    with pytest.raises(ValueError):
        chain_propagate_one_excitation(0.0, star_to_chain(recurrence_coefficients(FLAT, 5)), 6,
                                       TimeGrid.from_span(1.0, 0.1))
