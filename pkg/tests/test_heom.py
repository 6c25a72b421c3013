import numpy as np
import pytest

from nmdyn.bath import BathSpec, CorrelationSum, Drude, matsubara_terms
from nmdyn.core import SIGMA_X, SIGMA_Z, TimeGrid
from nmdyn.errors import BudgetError, ConfigError
from nmdyn.exact import dephasing_exact, dephasing_functions
from nmdyn.heom import ado_count, build_hierarchy, enumerate_indices, heom_evolve, heom_rhs
from nmdyn.mastereq import SystemSpec, tcl2_evolve

EXCITED = np.diag([1.0, 0.0]).astype(complex)
PLUS = 0.5 * np.ones((2, 2), dtype=complex)
SPIN_BOSON = SystemSpec(-0.5 * SIGMA_X, (SIGMA_Z,))
HIGH_T = BathSpec(Drude(lam=0.01, gamma=1.0), beta=0.1)


def double_integral(cs: CorrelationSum, t):
    """``G(t) = int_0^t ds int_0^s du alpha(u)`` for an exponential sum."""
    c = np.asarray(cs.coeffs)[:, None]
    mu = np.asarray(cs.rates)[:, None]
    return np.sum(c * (t / mu - (1 - np.exp(-mu * t)) / mu**2), axis=0)


def free_evolution(H, rho0, times):
    e, v = np.linalg.eigh(H)
    u = np.einsum("ij,tj,kj->tik", v, np.exp(-1j * np.outer(times, e)), v.conj())
    return u @ rho0 @ np.conj(np.swapaxes(u, 1, 2))


def test_ado_count_matches_enumeration():
    for k, depth in [(1, 5), (2, 4), (3, 3), (4, 2)]:
        idx = enumerate_indices(k, depth)
        assert len(idx) == ado_count(k, depth)
        assert len({tuple(r) for r in idx}) == len(idx)
        assert idx.sum(axis=1).max() == depth
        assert np.all(np.diff(idx.sum(axis=1)) >= 0)


def test_zero_coupling_decouples():
    bath = BathSpec(Drude(lam=0.0, gamma=1.0), beta=0.1)
    state = build_hierarchy(SPIN_BOSON, [matsubara_terms(bath, 1)], 3, EXCITED)
    deriv = heom_rhs(state)
    assert np.allclose(deriv[0], -1j * (SPIN_BOSON.H @ EXCITED - EXCITED @ SPIN_BOSON.H), atol=1e-14)
    assert np.max(np.abs(deriv[1:])) == 0.0
    grid = TimeGrid.from_span(3.0, 0.01)
    tr = heom_evolve(SPIN_BOSON, matsubara_terms(bath, 1), EXCITED, 3, grid)
    assert np.max(np.abs(tr.states - free_evolution(SPIN_BOSON.H, EXCITED, grid.times))) < 1e-8


def test_invariants_along_propagation():
    tr = heom_evolve(SPIN_BOSON, matsubara_terms(HIGH_T, 2), EXCITED, 6, TimeGrid.from_span(5.0, 0.01))
    s = tr.states
    assert np.max(np.abs(np.trace(s, axis1=1, axis2=2) - 1)) < 1e-8
    assert np.max(np.abs(s - np.conj(np.swapaxes(s, 1, 2)))) < 1e-9
    assert np.min(np.linalg.eigvalsh(s)) > -1e-7


def test_depth_convergence_is_monotone():
    grid = TimeGrid.from_span(5.0, 0.01)
    exp = matsubara_terms(HIGH_T, 2)
    runs = {d: heom_evolve(SPIN_BOSON, exp, EXCITED, d, grid).states for d in (1, 3, 5, 7)}
    gaps = [np.max(np.abs(runs[d] - runs[d + 2])) for d in (1, 3, 5)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_depth_8_vs_12_and_tcl2():
    grid = TimeGrid.from_span(5.0, 0.005)
    exp = matsubara_terms(HIGH_T, 2)
    d8 = heom_evolve(SPIN_BOSON, exp, EXCITED, 8, grid).states
    d12 = heom_evolve(SPIN_BOSON, exp, EXCITED, 12, grid).states
    pops = np.s_[:, [0, 1], [0, 1]]
    assert np.max(np.abs(d8[pops] - d12[pops])) < 1e-6
    tcl = tcl2_evolve(SPIN_BOSON, exp, EXCITED, grid).states
    assert np.max(np.abs(d8[pops] - tcl[pops]).real) < 1e-2


def test_coupling_scaling_is_second_order():
    grid = TimeGrid.from_span(2.0, 0.01)
    exp = matsubara_terms(HIGH_T, 2)
    free = free_evolution(SPIN_BOSON.H, EXCITED, grid.times)[-1]

    def deviation(system, expansion):
        return np.max(np.abs(heom_evolve(system, expansion, EXCITED, 6, grid).states[-1] - free))

    full = deviation(SPIN_BOSON, exp)
    half_amp = deviation(SystemSpec(SPIN_BOSON.H, (0.5 * SIGMA_Z,)), exp)
    assert 3.5 <= full / half_amp <= 4.5
    # the kernel is linear in lam, so halving lam halves the leading deviation
    half_lam = deviation(SPIN_BOSON, matsubara_terms(BathSpec(Drude(lam=0.005, gamma=1.0), beta=0.1), 2))
    assert 1.7 <= full / half_lam <= 2.2


def test_markov_terminator_improves_low_depth():
    grid = TimeGrid.from_span(5.0, 0.01)
    bath = BathSpec(Drude(lam=0.2, gamma=1.0), beta=0.1)
    exp = matsubara_terms(bath, 1)
    ref = heom_evolve(SPIN_BOSON, exp, EXCITED, 10, grid).states
    err = {
        term: np.max(np.abs(heom_evolve(SPIN_BOSON, exp, EXCITED, 2, grid, terminator=term).states - ref))
        for term in ("truncate", "markov")
    }
    assert err["markov"] < err["truncate"]


def test_pure_dephasing_matches_closed_form():
    system = SystemSpec(0.5 * SIGMA_Z, (SIGMA_Z,))
    bath = BathSpec(Drude(lam=0.05, gamma=1.0), beta=0.5)
    exp = matsubara_terms(bath, 1)
    grid = TimeGrid.from_span(5.0, 0.01)
    coh = heom_evolve(system, exp, PLUS, 12, grid).states[:, 0, 1]
    G = double_integral(exp, grid.times)
    ref = 0.5 * np.exp(-1j * grid.times - 4 * G.real)
    assert np.max(np.abs(coh - ref)) < 1e-8


def test_dephasing_exact_full_drude():
    bath = BathSpec(Drude(lam=0.05, gamma=1.0), beta=0.5)
    times = np.array([0.1, 1.0, 3.0, 5.0])
    gam, phi = dephasing_functions(bath, times)
    G = double_integral(matsubara_terms(bath, 20000), times)
    assert np.max(np.abs(gam - G.real)) < 1e-6
    assert np.max(np.abs(phi + G.imag)) < 1e-10
    grid = TimeGrid(0.0, 1.0, 3)
    tr = dephasing_exact(SystemSpec(0.5 * SIGMA_Z, (SIGMA_Z,)), bath, PLUS, grid)
    g3 = double_integral(matsubara_terms(bath, 20000), grid.times)
    assert np.max(np.abs(tr.states[:, 0, 1] - 0.5 * np.exp(-1j * grid.times - 4 * g3.real))) < 1e-6


def test_budget_and_config_errors():
    exp = matsubara_terms(HIGH_T, 2)
    with pytest.raises(BudgetError):
        build_hierarchy(SPIN_BOSON, [exp], 20, EXCITED, max_ados=1000)
    with pytest.raises(ConfigError):
        build_hierarchy(SPIN_BOSON, [exp], 0, EXCITED)
    with pytest.raises(ConfigError):
        build_hierarchy(SPIN_BOSON, [exp, exp], 2, EXCITED)
    with pytest.raises(ConfigError):
        build_hierarchy(SPIN_BOSON, [exp], 2, EXCITED, terminator="other")
