"""Acceptance criteria 1 to 12, each reported as one PASS/FAIL line in the terminal summary."""
import warnings
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from conftest import ACCEPTANCE_LINES
from oracles import amplitude_states, exponential_amplitude, trace_dist
from nmdyn import cli
from nmdyn.bath import BathSpec, CorrelationSum, Drude, OhmicFamily, Tabulated, matsubara_terms
from nmdyn.chain import (
    chain_propagate_one_excitation, gauss_discretize, recurrence_coefficients, star_propagate_one_excitation,
    star_to_chain,
)
from nmdyn.core import SIGMA_MINUS, SIGMA_X, SIGMA_Z, TimeGrid, random_density_matrix
from nmdyn.exact import amplitude_damping_map, exact_tcl_rates, one_excitation_amplitude
from nmdyn.heom import heom_evolve
from nmdyn.mastereq import (
    LindbladSpec, SystemSpec, TimeLocalSpec, gibbs_state, lindblad_evolve, secular_markov_generator, tcl2_evolve,
    time_local_evolve,
)
from nmdyn.nonmarkov import DynamicalMap, blp_measure, build_map, canonical_rates, rhp_measure
from nmdyn.stochastic import hops_ensemble, nmqj_evolve, sln_ensemble

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EXCITED = np.diag([1.0, 0.0]).astype(complex)
EXCITED_KET = np.array([1.0, 0.0], dtype=complex)
PLUS_KET = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2)
DECAY = SystemSpec(np.zeros((2, 2)), (SIGMA_MINUS,))
SPIN_BOSON = SystemSpec(-0.5 * SIGMA_X, (SIGMA_Z,))
HIGH_T = BathSpec(Drude(lam=0.01, gamma=1.0), beta=0.1)
POPS = np.s_[:, [0, 1], [0, 1]]


def report(n, checks):
    """Record ``checks`` (label -> (passed, detail)) for criterion ``n`` and assert them all."""
    ok = all(p for p, _ in checks.values())
    detail = "; ".join(f"{k} {d}" for k, (_, d) in checks.items())
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[n])
    assert ok, ACCEPTANCE_LINES[n]


def below(value, bound):
    return bool(value < bound), f"{value:.3g} < {bound:g}"


def test_criterion_01_volterra_oracle():
    checks = {}
    for label, g, dt in (("overdamped", 0.2, 2e-3), ("underdamped", 2.0, 1e-3)):
        grid = TimeGrid.from_span(10.0, dt)
        A = one_excitation_amplitude(CorrelationSum.single(g, 1.0), grid).A
        ref = exponential_amplitude(g, 1.0, grid.times)
        # the underdamped amplitude has zeros; its error is taken relative to max |A|
        scale = np.abs(ref) if label == "overdamped" else np.max(np.abs(ref))
        checks[label] = below(np.max(np.abs(A - ref) / scale), 1e-6)
    report(1, checks)


def test_criterion_02_tcl2_weak_coupling():
    g, gam = 0.01, 1.0
    grid = TimeGrid.from_span(10 / gam, 0.01)
    pop = tcl2_evolve(DECAY, CorrelationSum.single(g, gam), EXCITED, grid).states[:, 0, 0].real
    ref = np.abs(exponential_amplitude(g, gam, grid.times)) ** 2
    report(2, {"max |P - |A|^2|": below(np.max(np.abs(pop - ref)), 1e-3)})


def test_criterion_03_heom_convergence_and_tcl2():
    grid = TimeGrid.from_span(5.0, 0.005)
    exp = matsubara_terms(HIGH_T, 2)
    d8 = heom_evolve(SPIN_BOSON, exp, EXCITED, 8, grid).states
    d12 = heom_evolve(SPIN_BOSON, exp, EXCITED, 12, grid).states
    tcl = tcl2_evolve(SPIN_BOSON, exp, EXCITED, grid).states
    report(3, {
        "depth 8 vs 12": below(np.max(np.abs(d8[POPS] - d12[POPS])), 1e-6),
        "HEOM vs TCL2": below(np.max(np.abs(d8[POPS] - tcl[POPS])), 1e-2),
    })


def test_criterion_04_sln_vs_heom():
    exp = matsubara_terms(HIGH_T, 1)
    grid = TimeGrid.from_span(2.0, 0.02)
    heom = heom_evolve(SPIN_BOSON, exp, EXCITED, 8, grid).states[-1]
    res = sln_ensemble(SPIN_BOSON, None, exp, EXCITED, grid, 10_000, 41)
    dist = trace_dist(res.rho[-1], heom)
    report(4, {"trace distance at t = 2": below(dist, 3 * res.stderr[-1])})


def test_criterion_05_hops_vs_exact():
    kernel = CorrelationSum.single(0.5, 1.0)
    grid = TimeGrid.from_span(10.0, 0.02)
    ref = amplitude_states(exponential_amplitude(0.5, 1.0, grid.times), np.outer(PLUS_KET, PLUS_KET.conj()))
    checks, err = {}, {}
    for label, nonlinear in (("linear", False), ("nonlinear", True)):
        res = hops_ensemble(DECAY, None, kernel, PLUS_KET, grid, 3, 10_000, 51, nonlinear=nonlinear)
        excess = trace_dist(res.rho, ref) - np.maximum(0.02, 3 * res.stderr)
        checks[label] = bool(np.all(excess <= 0)), f"max(dist - bound) = {np.max(excess):.3g} <= 0"
        err[label] = res.stderr
    worst = np.max(err["nonlinear"] - err["linear"])
    checks["stderr nonlinear <= linear"] = bool(worst <= 0), f"max difference {worst:.3g}"
    report(5, checks)


def test_criterion_06_nmqj():
    alpha = CorrelationSum.single(2.0, 1.0 + 2.0j)
    grid = TimeGrid.from_span(6.0, 0.005)
    rates = exact_tcl_rates(alpha, 0.0, grid.refine(2))
    assert rates.gamma1.min() < 0
    res, _ = nmqj_evolve(rates.spec, EXCITED_KET, grid, 10_000, 61)
    det = time_local_evolve(rates.spec, EXCITED, grid).states
    excess = trace_dist(res.rho, det) - np.maximum(0.03, 3 * res.stderr)
    rate = 0.4
    flat = TimeGrid.from_span(4.0, 0.01)
    res_c, jumps = nmqj_evolve(TimeLocalSpec(DECAY, ((SIGMA_MINUS, rate),)), EXCITED_KET, flat, 10_000, 62)
    lind = lindblad_evolve(LindbladSpec(DECAY, (rate,)), EXCITED, flat).states
    excess_c = trace_dist(res_c.rho, lind) - np.maximum(1e-12, 3 * res_c.stderr)
    waits = jumps.first_jump_times[np.isfinite(jumps.first_jump_times)]
    # only jumps before the end of the grid are observed
    lam = 2 * rate
    p = stats.kstest(waits, "truncexpon", args=(lam * flat.t_final, 0, 1 / lam)).pvalue
    report(6, {
        "exact rates": (bool(np.all(excess <= 0)), f"max(dist - bound) = {np.max(excess):.3g} <= 0"),
        "constant rate": (bool(np.all(excess_c <= 0)), f"max(dist - 3 stderr) = {np.max(excess_c):.3g} <= 0"),
        "KS": (bool(p > 0.01), f"p = {p:.3g} > 0.01"),
    })


def flat_kernel(eta, wc, omega_s):
    """Rotating-frame zero-temperature kernel of ``J = eta`` on ``[0, wc]``."""

    def alpha(t):
        t = np.asarray(t, dtype=float)
        small = np.abs(t) < 1e-8
        ts = np.where(small, 1.0, t)
        val = np.where(small, eta * wc * (1 - 0.5j * wc * t), eta * (1 - np.exp(-1j * wc * ts)) / (1j * ts))
        return val * np.exp(1j * omega_s * t)

    return alpha


def test_criterion_07_chain_mapping():
    flat = Tabulated(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    c = recurrence_coefficients(flat, 21)
    n = np.arange(1, 21)
    checks = {
        "alpha_n": below(np.max(np.abs(c.alphas[:21] - 0.5)), 1e-12),
        "beta_n": below(np.max(np.abs(c.betas[1:21] - n**2 / (4 * (4 * n**2 - 1)))), 1e-10),
    }
    J = OhmicFamily(s=1.0, eta=0.05, omega_c=1.0, cutoff_shape="hard")
    coeffs = recurrence_coefficients(J, 40)
    grid = TimeGrid.from_span(20.0, 0.05)
    star = star_propagate_one_excitation(0.5, gauss_discretize(coeffs), grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        chain = chain_propagate_one_excitation(0.5, star_to_chain(coeffs), 40, grid)
    checks["star vs chain"] = below(np.max(np.abs(star.A - chain.A)), 1e-10)
    eta, omega_s = 0.02, 0.5
    Jf = Tabulated(np.array([0.0, 1.0]), np.array([eta, eta]))
    grid = TimeGrid.from_span(50.0, 0.05)
    long = chain_propagate_one_excitation(omega_s, star_to_chain(recurrence_coefficients(Jf, 200)), 200, grid)
    ref = one_excitation_amplitude(flat_kernel(eta, 1.0, omega_s), TimeGrid.from_span(50.0, 0.01), omega_s).A[::5]
    valid = grid.times < min(long.recurrence_time, grid.t_final + 1)
    checks["200 sites vs Volterra"] = below(np.max(np.abs(long.A[valid] - ref[valid])), 1e-3)
    report(7, checks)


def test_criterion_08_gauss_discretization():
    J = OhmicFamily(s=1.0, eta=0.3, omega_c=2.0, cutoff_shape="hard")
    star = gauss_discretize(recurrence_coefficients(J, 10))
    total = 0.3 * 2.0**2 / 2
    flat = gauss_discretize(recurrence_coefficients(Tabulated(np.array([0.0, 1.0]), np.array([1.0, 1.0])), 10))
    moments = [abs(np.sum(flat.weights * flat.nodes**k) * (k + 1) - 1) for k in range(20)]
    report(8, {
        "sum W": below(abs(star.weights.sum() / total - 1), 1e-10),
        "moments to degree 19": below(max(moments), 1e-8),
    })


def test_criterion_09_gibbs_relaxation():
    beta = 1.0
    system = SystemSpec(0.5 * SIGMA_Z - 0.2 * SIGMA_X, (SIGMA_X,))
    spec = secular_markov_generator(system, BathSpec(OhmicFamily(s=1.0, eta=0.05, omega_c=5.0), beta))
    target = gibbs_state(system.H, beta)
    grid = TimeGrid.from_span(50 / min(r for r in spec.rates if r > 1e-12), 0.05)
    rng = np.random.default_rng(9)
    worst = max(trace_dist(lindblad_evolve(spec, random_density_matrix(2, rng), grid).states[-1], target)
                for _ in range(5))
    by_freq = {round(w, 10): r for w, r in zip(spec.frequencies, spec.rates)}
    kms = [abs(min(by_freq[w], by_freq[-w]) / max(by_freq[w], by_freq[-w]) / np.exp(-beta * w) - 1)
           for w in by_freq if w > 1e-8 and -w in by_freq]
    assert kms
    report(9, {"steady state": below(worst, 1e-6), "KMS ratio": below(max(kms), 1e-6)})


def test_criterion_10_nonmarkovianity():
    spec = LindbladSpec(SystemSpec(0.5 * SIGMA_Z, (SIGMA_MINUS,)), (0.3,))
    grid = TimeGrid.from_span(5.0, 0.002)
    semigroup = build_map(lambda rho: lindblad_evolve(spec, rho, grid), 2)
    checks = {
        "Lindblad BLP": below(blp_measure(semigroup).value, 1e-6),
        "Lindblad RHP": below(rhp_measure(semigroup).value, 1e-6),
    }
    alpha = CorrelationSum.single(2.0, 1.0 + 2.0j)
    grid = TimeGrid.from_span(6.0, 0.002)
    dmap = DynamicalMap(grid.times, amplitude_damping_map(one_excitation_amplitude(alpha, grid)))
    gamma1 = exact_tcl_rates(alpha, 0.0, grid).gamma1
    blp, rhp = blp_measure(dmap).value, rhp_measure(dmap)
    checks["underdamped BLP"] = bool(blp > 0), f"{blp:.3g} > 0"
    checks["underdamped RHP"] = bool(rhp.value > 0), f"{rhp.value:.3g} > 0"
    pos, neg = np.flatnonzero(rhp.g > 0), np.flatnonzero(gamma1 < 0)
    shift = max(abs(pos[0] - neg[0]), abs(pos[-1] - neg[-1]))
    checks["interval edges"] = bool(shift <= 2), f"{shift} <= 2 steps"
    cr = canonical_rates(dmap)
    pick = np.argmax(np.abs(cr.rates), axis=1)
    checks["canonical rate"] = below(np.max(np.abs(cr.rates[np.arange(len(pick)), pick] - gamma1)), 1e-5)
    report(10, checks)


def test_criterion_11_determinism(tmp_path):
    checks = {}
    for name, block, n in (("sln_drude", "sln", 400), ("hops_nonlinear", "hops_nonlinear", 400),
                           ("nmqj_underdamped", "nmqj", 2000)):
        data = yaml.safe_load((CONFIGS / f"{name}.yaml").read_text())
        data[block]["n_traj"] = n
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump(data))
        outs = []
        for w in (1, 4, 8):
            out = tmp_path / f"{name}_{w}"
            assert cli.main(["simulate", str(path), "--workers", str(w), "--out", str(out)]) == 0
            outs.append(b"".join(p.read_bytes() for p in sorted(out.iterdir())))
        same = outs[0] == outs[1] == outs[2]
        checks[name] = same, "identical" if same else "differs"
    report(11, checks)


def rk4_order(evolve, t_final, dts):
    errs = []
    fine = evolve(TimeGrid.from_span(t_final, dts[-1] / 4)).states[-1]
    for dt in dts:
        errs.append(np.max(np.abs(evolve(TimeGrid.from_span(t_final, dt)).states[-1] - fine)))
    return np.log2(errs[0] / errs[1])


def test_criterion_12_invariants():
    rng = np.random.default_rng(12)
    rho0 = random_density_matrix(2, rng)
    grid = TimeGrid.from_span(5.0, 0.01)
    lind = LindbladSpec(SystemSpec(0.5 * SIGMA_Z - 0.3 * SIGMA_X, (SIGMA_MINUS, SIGMA_Z)), (0.2, 0.1))
    runs = {
        "lindblad": lindblad_evolve(lind, rho0, grid).states,
        "tcl2": tcl2_evolve(SPIN_BOSON, matsubara_terms(HIGH_T, 2), rho0, grid).states,
        "heom": heom_evolve(SPIN_BOSON, matsubara_terms(HIGH_T, 2), rho0, 6, grid).states,
        "time_local": time_local_evolve(exact_tcl_rates(CorrelationSum.single(2.0, 1.0 + 2.0j), 0.0,
                                                        grid.refine(2)).spec, rho0, grid).states,
    }
    checks = {}
    for label, s in runs.items():
        tr = np.max(np.abs(np.trace(s, axis1=1, axis2=2) - 1))
        herm = np.max(np.abs(s - np.conj(np.swapaxes(s, 1, 2))))
        ok = tr < 1e-8 and herm < 1e-9
        detail = f"trace {tr:.1e}, herm {herm:.1e}"
        if label in ("lindblad", "heom"):
            low = np.min(np.linalg.eigvalsh(s))
            ok = ok and low > -1e-7
            detail += f", min eig {low:.1e}"
        checks[label] = ok, detail
    order = rk4_order(lambda g: lindblad_evolve(lind, rho0, g), 5.0, (0.2, 0.1))
    checks["RK4 order"] = bool(3.5 < order < 4.5), f"{order:.2f}"
    errs = []
    for dt in (0.02, 0.01):
        g = TimeGrid.from_span(5.0, dt)
        A = one_excitation_amplitude(CorrelationSum.single(0.5, 1.0), g).A
        errs.append(np.max(np.abs(A - exponential_amplitude(0.5, 1.0, g.times))))
    v_order = np.log2(errs[0] / errs[1])
    checks["Volterra order"] = bool(1.7 < v_order < 2.3), f"{v_order:.2f}"
    report(12, checks)
