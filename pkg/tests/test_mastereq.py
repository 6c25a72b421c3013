import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmdyn.bath import BathSpec, CorrelationSum, Drude, OhmicFamily
from nmdyn.core import SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Z, TimeGrid, random_density_matrix
from nmdyn.errors import BudgetError, ConfigError
from nmdyn.mastereq import (
    LindbladSpec, SystemSpec, TimeLocalSpec, gibbs_state, lindblad_evolve, niba_evolve, niba_kernel,
    qrt_two_time, secular_markov_generator, steady_state, tcl2_evolve, time_local_evolve,
)
from nmdyn.nonmarkov import trace_distance

EXCITED = np.diag([1.0, 0.0]).astype(complex)


def qubit(omega=1.0, L=SIGMA_MINUS):
    return SystemSpec(0.5 * omega * SIGMA_Z, (L,))


def test_lindblad_zero_rate_is_unitary(rng):
    rho0 = random_density_matrix(2, rng)
    tr = lindblad_evolve(LindbladSpec(qubit(), (0.0,)), rho0, TimeGrid(0, 0.01, 500))
    purity = np.einsum("tij,tji->t", tr.states, tr.states).real
    assert np.max(np.abs(purity - purity[0])) < 1e-8


def test_lindblad_decay_closed_form():
    rate = 0.3
    grid = TimeGrid(0, 0.01, 1000)
    tr = lindblad_evolve(LindbladSpec(qubit(), (rate,)), EXCITED, grid)
    assert np.max(np.abs(tr.states[:, 0, 0].real - np.exp(-2 * rate * grid.times))) < 1e-9


def test_lindblad_steady_state_is_ground():
    rate = 0.5
    grid = TimeGrid.from_span(20 / rate, 0.01)
    tr = lindblad_evolve(LindbladSpec(qubit(), (rate,)), EXCITED, grid)
    assert trace_distance(tr.states[-1], np.diag([0, 1])) < 1e-8
    assert trace_distance(steady_state(LindbladSpec(qubit(), (rate,))), np.diag([0, 1])) < 1e-10


@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=3), st.integers(0, 2**31))
def test_lindblad_invariants(rates, seed):
    r = np.random.default_rng(seed)
    d = 3
    ops = tuple(r.standard_normal((d, d)) + 1j * r.standard_normal((d, d)) for _ in rates)
    x = r.standard_normal((d, d)) + 1j * r.standard_normal((d, d))
    system = SystemSpec(x + x.conj().T, ops)
    tr = lindblad_evolve(LindbladSpec(system, tuple(rates)), random_density_matrix(d, r),
                         TimeGrid(0, 0.002, 200))
    s = tr.states
    assert np.max(np.abs(np.trace(s, axis1=1, axis2=2) - 1)) < 1e-8
    assert np.max(np.abs(s - np.conj(np.swapaxes(s, 1, 2)))) < 1e-10
    assert np.min(np.linalg.eigvalsh(s)) > -1e-7


def test_lindblad_rejects_negative_rate():
    with pytest.raises(ConfigError):
        LindbladSpec(qubit(), (-0.1,))


def test_tcl2_without_coupling_is_unitary():
    grid = TimeGrid(0, 0.01, 300)
    rho0 = 0.5 * np.ones((2, 2), dtype=complex)
    bath = BathSpec(OhmicFamily(eta=0.0), np.inf)
    tr = tcl2_evolve(qubit(2.0), bath, rho0, grid)
    free = lindblad_evolve(LindbladSpec(qubit(2.0), (0.0,)), rho0, grid)
    assert np.max(np.abs(tr.states - free.states)) < 1e-10


def test_tcl2_preserves_hermiticity():
    bath = BathSpec(Drude(lam=0.1, gamma=1.0), beta=1.0)
    system = SystemSpec(0.5 * SIGMA_Z - 0.3 * SIGMA_X, (SIGMA_Z,))
    tr = tcl2_evolve(system, bath, EXCITED, TimeGrid(0, 0.02, 200))
    s = tr.states
    assert np.max(np.abs(s - np.conj(np.swapaxes(s, 1, 2)))) < 1e-9
    assert np.max(np.abs(np.trace(s, axis1=1, axis2=2) - 1)) < 1e-8


def test_tcl2_markov_limit():
    big_gamma, ratio = 0.05, 100.0
    gam = ratio * big_gamma
    alpha = CorrelationSum.single(big_gamma * gam, gam)
    grid = TimeGrid.from_span(5 / big_gamma, 0.01)
    system = SystemSpec(np.zeros((2, 2)), (SIGMA_MINUS,))
    rho0 = np.array([[0.7, 0.3], [0.3, 0.3]], dtype=complex)
    tcl = tcl2_evolve(system, alpha, rho0, grid)
    lin = lindblad_evolve(LindbladSpec(system, (big_gamma,)), rho0, grid)
    assert trace_distance(tcl.states[-1], lin.states[-1]) < 0.02


def test_tcl2_budget_guard():
    with pytest.raises(BudgetError, match="dt >="):
        tcl2_evolve(qubit(), CorrelationSum.single(0.1, 1.0), EXCITED, TimeGrid(0, 0.01, 2000), budget=1e5)


def _secular_setup(beta):
    system = SystemSpec(0.5 * SIGMA_Z - 0.2 * SIGMA_X, (SIGMA_X,))
    bath = BathSpec(OhmicFamily(s=1.0, eta=0.05, omega_c=5.0), beta)
    return system, bath, secular_markov_generator(system, bath)


def test_secular_kms_ratio():
    beta = 1.3
    _, _, spec = _secular_setup(beta)
    by_freq = {round(w, 10): r for w, r in zip(spec.frequencies, spec.rates)}
    pairs = [w for w in by_freq if w > 1e-8 and -w in by_freq]
    assert pairs
    for w in pairs:
        lo, hi = sorted((by_freq[w], by_freq[-w]))
        assert lo / hi == pytest.approx(np.exp(-beta * w), rel=1e-6)


def test_secular_relaxes_to_gibbs(rng):
    beta = 1.0
    system, _, spec = _secular_setup(beta)
    target = gibbs_state(system.H, beta)
    t_end = 50 / min(r for r in spec.rates if r > 1e-12)
    grid = TimeGrid.from_span(t_end, 0.05)
    for _ in range(5):
        tr = lindblad_evolve(spec, random_density_matrix(2, rng), grid)
        assert trace_distance(tr.states[-1], target) < 1e-6


def test_secular_gibbs_limits():
    _, _, cold = _secular_setup(200.0)
    e, v = np.linalg.eigh(cold.system.H)
    ground = np.outer(v[:, 0], v[:, 0].conj())
    assert trace_distance(steady_state(cold), ground) < 1e-6
    _, _, hot = _secular_setup(1e-4)
    assert trace_distance(steady_state(hot), np.eye(2) / 2) < 1e-4


def test_qrt_examples():
    omega, rate = 1.5, 0.2
    spec = LindbladSpec(qubit(omega), (rate,))
    rho0 = np.array([[0.6, 0.2], [0.2, 0.4]], dtype=complex)
    rho_t2 = lindblad_evolve(spec, rho0, TimeGrid.from_span(1.0, 1e-3)).states[-1]
    same = qrt_two_time(spec, SIGMA_Z, SIGMA_X, rho0, 1.0, 1.0)
    assert same == pytest.approx(np.trace(SIGMA_Z @ SIGMA_X @ rho_t2), abs=1e-10)
    # B = identity reproduces the single-time expectation
    one = qrt_two_time(spec, SIGMA_X, np.eye(2), rho0, 0.0, 2.0)
    ref = lindblad_evolve(spec, rho0, TimeGrid.from_span(2.0, 1e-3)).expect(SIGMA_X)[-1]
    assert one == pytest.approx(ref, abs=1e-10)
    # <sigma_plus(t1) sigma_minus(t2)> = rho_ee(t2) exp((i omega - rate)(t1 - t2))
    val = qrt_two_time(spec, SIGMA_PLUS, SIGMA_MINUS, rho0, 1.0, 2.5)
    expected = rho_t2[0, 0] * np.exp((1j * omega - rate) * 1.5)
    assert val == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ValueError):
        qrt_two_time(spec, SIGMA_Z, SIGMA_Z, rho0, 2.0, 1.0)


def test_niba_examples():
    grid = TimeGrid(0, 5e-4, 20000)
    assert np.all(niba_evolve(0.0, OhmicFamily(eta=0.1), 1.0, grid) == 1.0)
    p = niba_evolve(1.3, None, np.inf, grid)
    assert np.max(np.abs(p - np.cos(1.3 * grid.times))) < 1e-6
    f0 = niba_kernel(0.7, OhmicFamily(s=1.0, eta=0.2), 2.0, [0.0])[0]
    assert f0 == pytest.approx(0.49)


def test_niba_relaxes_with_bath():
    grid = TimeGrid(0, 0.05, 300)
    env = {}
    for eta in (0.1, 0.2):
        p = niba_evolve(1.0, OhmicFamily(s=1.0, eta=eta, omega_c=10.0), 1.0, grid)
        assert p[0] == 1.0
        env[eta] = np.abs(p[:300]).reshape(5, 60).max(axis=1)
        assert np.all(np.diff(env[eta]) < 0)
    assert np.all(env[0.2][1:] < env[0.1][1:])


def test_time_local_reductions(rng):
    grid = TimeGrid(0, 0.01, 400)
    rho0 = random_density_matrix(2, rng)
    sys_ = qubit(1.0)
    tl = time_local_evolve(TimeLocalSpec(sys_, ((SIGMA_MINUS, 0.3),)), rho0, grid)
    lin = lindblad_evolve(LindbladSpec(sys_, (0.3,)), rho0, grid)
    assert np.max(np.abs(tl.states - lin.states)) < 1e-9
    free_tl = time_local_evolve(TimeLocalSpec(sys_, ((SIGMA_MINUS, lambda t: 0.0),)), rho0, grid)
    free = lindblad_evolve(LindbladSpec(sys_, (0.0,)), rho0, grid)
    assert np.max(np.abs(free_tl.states - free.states)) < 1e-12


def test_tcl2_decay_closed_form():
    # T = 0 exponential kernel: P(t) = exp(-2 (g/gam) (t - (1 - exp(-gam t)) / gam))
    g, gam = 0.01, 1.0
    grid = TimeGrid.from_span(10.0, 0.01)
    t = grid.times
    pop = tcl2_evolve(SystemSpec(np.zeros((2, 2)), (SIGMA_MINUS,)), CorrelationSum.single(g, gam), EXCITED, grid)
    ref = np.exp(-2 * g / gam * (t - (1 - np.exp(-gam * t)) / gam))
    assert np.max(np.abs(pop.states[:, 0, 0].real - ref)) < 1e-10
