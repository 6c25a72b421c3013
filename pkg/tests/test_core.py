import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmdyn.core import (
    SIGMA_MINUS, SIGMA_X, SIGMA_Y, SIGMA_Z, TimeGrid, anticommutator_super, apply_dissipator, check_density_matrix,
    commutator_super, dissipator_super, gell_mann_basis, hamiltonian_super, integrate, random_density_matrix,
    sprepost, trace_norm, unvec, vec, volterra_integrate,
)
from nmdyn.errors import InvariantError, NumericalError

dims = st.integers(min_value=1, max_value=4)
seeds = st.integers(min_value=0, max_value=2**31)


def test_commutator_identity_is_zero():
    assert np.allclose(commutator_super(np.eye(3)), 0)


def test_anticommutator_identity_is_twice_identity():
    assert np.allclose(anticommutator_super(np.eye(2)), 2 * np.eye(4))


def test_commutator_pauli_example():
    out = unvec(commutator_super(SIGMA_Z) @ vec(SIGMA_X))
    assert np.allclose(out, 2j * SIGMA_Y)


@pytest.mark.parametrize("a, expected", [(np.eye(2), 2.0), (SIGMA_Z, 2.0), (np.array([[0, 1], [0, 0]]), 1.0)])
def test_trace_norm_examples(a, expected):
    assert trace_norm(a) == pytest.approx(expected, abs=1e-14)


def test_vec_is_column_stacking():
    a = np.array([[1, 2], [3, 4]])
    assert np.array_equal(vec(a), [1, 3, 2, 4])


@given(dims, seeds)
def test_vec_roundtrip_and_sandwich(d, seed):
    r = np.random.default_rng(seed)
    a, b, x = (r.standard_normal((d, d)) + 1j * r.standard_normal((d, d)) for _ in range(3))
    assert np.allclose(unvec(vec(x), d), x)
    assert np.allclose(sprepost(a, b) @ vec(x), vec(a @ x @ b))


@given(dims, seeds)
def test_dissipator_is_trace_preserving_and_hermiticity_preserving(d, seed):
    r = np.random.default_rng(seed)
    c = r.standard_normal((d, d)) + 1j * r.standard_normal((d, d))
    rho = random_density_matrix(d, r)
    out = apply_dissipator(c, rho, 0.7)
    assert abs(np.trace(out)) < 1e-12
    assert np.allclose(out, out.conj().T)
    assert np.allclose(unvec(dissipator_super(c, 0.7) @ vec(rho), d), out)


@given(dims, seeds)
def test_hamiltonian_super_generates_unitary_dynamics(d, seed):
    from scipy.linalg import expm

    r = np.random.default_rng(seed)
    x = r.standard_normal((d, d)) + 1j * r.standard_normal((d, d))
    h = x + x.conj().T
    rho = random_density_matrix(d, r)
    u = expm(-1j * h * 0.3)
    assert np.allclose(unvec(expm(0.3 * hamiltonian_super(h)) @ vec(rho), d), u @ rho @ u.conj().T)


@given(st.integers(min_value=2, max_value=5))
def test_gell_mann_basis_is_orthonormal(d):
    g = gell_mann_basis(d)
    gram = np.einsum("aij,bij->ab", g.conj(), g)
    assert g.shape == (d * d, d, d)
    assert np.allclose(gram, np.eye(d * d))
    assert np.allclose(g[0], np.eye(d) / np.sqrt(d))


@given(dims, seeds)
def test_random_density_matrix_is_valid(d, seed):
    rho = random_density_matrix(d, np.random.default_rng(seed))
    check_density_matrix(rho)


def test_check_density_matrix_rejects_negative_state():
    with pytest.raises(InvariantError):
        check_density_matrix(np.diag([1.2, -0.2]))


def test_timegrid_validation():
    with pytest.raises(ValueError):
        TimeGrid(0.0, -0.1, 10)
    g = TimeGrid.from_span(1.0, 0.1)
    assert g.n_steps == 10 and g.times[-1] == pytest.approx(1.0)


def test_rk4_fourth_order():
    # y' = i y cos t, y = exp(i sin t)
    def rhs(t, y):
        return 1j * np.cos(t) * y

    errs = []
    for n in (50, 100, 200):
        grid = TimeGrid(0.0, 5.0 / n, n)
        y = integrate(rhs, np.array([1.0]), grid)[:, 0]
        errs.append(np.max(np.abs(y - np.exp(1j * np.sin(grid.times)))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(np.log2(ratios) - 4) < 0.3)


def test_integrate_flags_nonfinite():
    with pytest.raises(NumericalError):
        integrate(lambda t, y: y * 1e200, np.array([1e200]), TimeGrid(0, 1.0, 5))


def _exponential_amplitude(g, gam, t):
    # Laplace inverse of (s + gam) / (s^2 + gam s + g)
    disc = np.sqrt(complex(gam * gam / 4 - g))
    s1, s2 = -gam / 2 + disc, -gam / 2 - disc
    return ((s1 + gam) * np.exp(s1 * t) - (s2 + gam) * np.exp(s2 * t)) / (s1 - s2)


def test_volterra_second_order():
    errs = []
    for n in (200, 400, 800):
        grid = TimeGrid(0.0, 8.0 / n, n)
        y, _ = volterra_integrate(lambda s: 0.2 * np.exp(-s), grid)
        errs.append(np.max(np.abs(y - _exponential_amplitude(0.2, 1.0, grid.times))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 4.0) < 0.3)


def test_volterra_constant_kernel_is_cosine():
    grid = TimeGrid(0.0, 1e-3, 5000)
    y, ydot = volterra_integrate(lambda s: np.ones_like(s), grid)
    assert np.max(np.abs(y - np.cos(grid.times))) < 1e-6
    assert np.max(np.abs(ydot + np.sin(grid.times))) < 1e-5


def test_sigma_minus_lowers_excited_state():
    assert np.allclose(SIGMA_MINUS @ np.array([1, 0]), [0, 1])
