"""Deterministic reduced-density-matrix solvers.

Dissipators follow ``Delta (2 C rho C^dag - {C^dag C, rho})`` throughout, so a
channel ``C = sigma_minus`` with rate ``Delta`` empties the excited state at ``2 Delta``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import integrate as sint
from scipy.interpolate import CubicSpline

from .bath.correlation import CorrelationSum, _quad, correlation_thermal, kernel_values, matsubara_expansion, thermal_pair
from .bath.spectral import BathSpec, Drude, OhmicFamily, SpectralDensity
from .core import (
    TimeGrid,
    Trajectory,
    apply_dissipator,
    check_density_matrix,
    check_trajectory,
    dissipator_super,
    hamiltonian_super,
    integrate,
    unvec,
    vec,
    volterra_integrate,
)
from .errors import BudgetError, ConfigError, KernelError

TOL_DEGENERATE = 1e-8


class SampledFunction:
    """Real or complex function known on a grid, evaluated by cubic splines."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values)
        self._re = CubicSpline(self.times, self.values.real)
        self._im = CubicSpline(self.times, self.values.imag) if np.iscomplexobj(self.values) else None

    def __call__(self, t):
        out = self._re(t)
        if self._im is not None:
            out = out + 1j * self._im(t)
        return out


def _hermitian(a, name, tol=1e-10):
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"{name} must be a square matrix")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.conj().T)) > tol:
        raise ConfigError(f"{name} is not Hermitian")
    return a


@dataclass(frozen=True)
class SystemSpec:
    """System Hamiltonian plus coupling operators ``L_j`` (not necessarily Hermitian)."""

    H: NDArray[np.complex128]
    couplings: tuple = ()
    labels: tuple = ()

    def __post_init__(self):
        h = _hermitian(self.H, "H_S")
        ops = tuple(np.asarray(c, dtype=complex) for c in self.couplings)
        for c in ops:
            if c.shape != h.shape or not np.all(np.isfinite(c)):
                raise ConfigError("coupling operators must be finite and match the dimension of H_S")
        labels = tuple(self.labels) if self.labels else tuple(f"L{j}" for j in range(len(ops)))
        if len(labels) != len(ops):
            raise ConfigError("one label per coupling operator is required")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "couplings", ops)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def coupling(self, index: int = 0):
        if not self.couplings:
            raise ConfigError("the system has no coupling operator")
        return self.couplings[index]


@dataclass(frozen=True)
class LindbladSpec:
    """Lindblad generator with rates ``Delta_k >= 0`` and channels ``C_k``.

    ``channels`` defaults to the system couplings. ``lamb_shift`` is added to
    ``H_S``; ``frequencies`` optionally records the Bohr frequency of each channel.
    """

    system: SystemSpec
    rates: tuple = ()
    channels: tuple | None = None
    lamb_shift: NDArray | None = None
    frequencies: tuple | None = None

    def __post_init__(self):
        chans = self.system.couplings if self.channels is None else tuple(np.asarray(c, dtype=complex) for c in self.channels)
        rates = tuple(float(r) for r in self.rates)
        if len(rates) != len(chans):
            raise ConfigError(f"{len(rates)} rates given for {len(chans)} channels")
        if any(r < 0 or not np.isfinite(r) for r in rates):
            raise ConfigError("Lindblad rates must be finite and nonnegative")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "rates", rates)
        if self.lamb_shift is not None:
            object.__setattr__(self, "lamb_shift", _hermitian(self.lamb_shift, "Lamb shift", 1e-9))

    @property
    def hamiltonian(self):
        return self.system.H if self.lamb_shift is None else self.system.H + self.lamb_shift


@dataclass(frozen=True)
class TimeLocalSpec:
    """Canonical time-local generator with possibly negative rates.

    ``channels`` holds ``(C_k, Delta_k)`` pairs; each entry may be a constant or a
    function of time. ``h_t`` is an optional time-dependent Hamiltonian added to ``H_S``.
    """

    system: SystemSpec
    channels: tuple = ()
    h_t: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple((c, r) for c, r in self.channels))

    def at(self, t: float):
        """``(H(t), [(C_k(t), Delta_k(t))])``."""
        h = self.system.H if self.h_t is None else self.system.H + np.asarray(self.h_t(t), dtype=complex)
        chans = []
        for c, r in self.channels:
            cv = np.asarray(c(t) if callable(c) else c, dtype=complex)
            rv = float(np.real(r(t))) if callable(r) else float(r)
            chans.append((cv, rv))
        return h, chans


# --- Lindblad ------------------------------------------------------------------------


def liouvillian(spec: LindbladSpec) -> NDArray[np.complex128]:
    """Superoperator of the Lindblad generator (column-stacking)."""
    sup = hamiltonian_super(spec.hamiltonian)
    for c, r in zip(spec.channels, spec.rates):
        sup = sup + dissipator_super(c, r)
    return sup


def _validated_rho(rho0, dim):
    rho = check_density_matrix(rho0)
    if rho.shape[0] != dim:
        raise ConfigError(f"initial state has dimension {rho.shape[0]}, system has {dim}")
    return rho


def _linear_propagate(sup, rho0, grid: TimeGrid, substeps: int = 1):
    return unvec(integrate(lambda t, y: sup @ y, vec(rho0), grid, substeps))


def lindblad_evolve(spec: LindbladSpec, rho0, grid: TimeGrid, *, substeps: int = 1, check: bool = True) -> Trajectory:
    """RK4 propagation of the Lindblad equation.

    Raises
    ------
    InvariantError
        If trace, Hermiticity or positivity break by more than 10x tolerance,
        which signals a step that is too large.
    """
    rho0 = _validated_rho(rho0, spec.system.dim)
    states = _linear_propagate(liouvillian(spec), rho0, grid, substeps)
    if check:
        check_trajectory(states, tol_tr=1e-8, tol_herm=1e-10, tol_pos=1e-8, t=grid.times)
    return Trajectory(grid.times, states)


def steady_state(spec: LindbladSpec) -> NDArray[np.complex128]:
    """Null vector of the Liouvillian, normalized to unit trace."""
    sup = liouvillian(spec)
    _, s, vh = np.linalg.svd(sup)
    rho = unvec(vh[-1].conj(), spec.system.dim)
    rho = rho / np.trace(rho)
    return 0.5 * (rho + rho.conj().T)


def gibbs_state(H, beta: float) -> NDArray[np.complex128]:
    """``exp(-beta H) / Z``; ``beta = inf`` gives the ground-state projector."""
    e, u = np.linalg.eigh(np.asarray(H, dtype=complex))
    if np.isinf(beta):
        w = (e - e[0] < TOL_DEGENERATE).astype(float)
    else:
        w = np.exp(-beta * (e - e[0]))
    w = w / w.sum()
    return (u * w) @ u.conj().T


# --- TCL2 ----------------------------------------------------------------------------


def _kernel_pair(bath, hermitian_coupling: bool):
    """Return ``(k_minus, k_plus)`` kernels (CorrelationSum, callable or None)."""
    if isinstance(bath, tuple):
        return bath
    if isinstance(bath, CorrelationSum) or callable(bath):
        return bath, None
    if not isinstance(bath, BathSpec):
        raise ConfigError("bath must be a BathSpec, a kernel, or a (alpha_minus, alpha_plus) pair")
    bath.require_bosonic()
    J = bath.J
    if bath.zero_temperature:
        if isinstance(J, OhmicFamily) and J.cutoff_shape == "exponential" and J.omega_max is None:
            return ohmic_closed_form(J), None
        return (lambda t: correlation_thermal(bath, t)), None
    if hermitian_coupling:
        if isinstance(J, Drude) and J.omega_max is None:
            return matsubara_expansion(bath), None
        return (lambda t: correlation_thermal(bath, t)), None
    return (lambda t: thermal_pair(bath, t)[0]), (lambda t: thermal_pair(bath, t)[1])


def ohmic_closed_form(J: OhmicFamily) -> Callable:
    """T = 0 kernel ``eta omega_c^2 Gamma(s+1) / (1 + i omega_c t)^(s+1)`` of the exponential Ohmic family."""
    from scipy.special import gamma

    pref = J.eta * J.omega_c**2 * gamma(J.s + 1.0)

    def alpha(t):
        return pref / (1.0 + 1j * J.omega_c * np.asarray(t, dtype=float)) ** (J.s + 1.0)

    return alpha


def _cumulative_transform(kernel, freqs, times, refine: int):
    """``I(w, t) = int_0^t k(s) exp(-i w s) ds`` for every ``w`` in ``freqs`` and ``t`` in ``times``.

    Exact for exponential sums; composite trapezoid on a grid ``refine`` times
    finer than ``times`` otherwise.
    """
    freqs = np.asarray(freqs, dtype=float)
    if isinstance(kernel, CorrelationSum):
        z = kernel.rates[None, :] + 1j * freqs[:, None]  # (nw, nterm)
        decay = np.exp(-z[:, None, :] * times[None, :, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(np.abs(z[:, None, :]) > 0, (1.0 - decay) / z[:, None, :], times[None, :, None])
        return np.einsum("wtm,m->wt", frac, kernel.coeffs)
    h = (times[1] - times[0]) / refine
    fine = h * np.arange((len(times) - 1) * refine + 1)
    k = kernel_values(kernel, fine)
    integrand = k[None, :] * np.exp(-1j * freqs[:, None] * fine[None, :])
    cum = sint.cumulative_trapezoid(integrand, dx=h, axis=1, initial=0.0)
    return cum[:, ::refine]


def tcl2_evolve(system: SystemSpec, bath, rho0, grid: TimeGrid, *, coupling_index: int = 0,
                refine: int = 8, budget: float = 1e8, check: bool = True) -> Trajectory:
    """Second-order time-convolutionless master equation for a single coupling ``L``.

    Solves (Schrodinger picture, ``Phi_-`` and ``Phi_+`` defined below)

        d rho/dt = -i[H, rho] + [Phi_-(t) rho, L^dag] + [Phi_+(t) rho, L] + h.c.,

    with ``Phi_-(t) = int_0^t alpha_-(s) L(-s) ds`` and
    ``Phi_+(t) = int_0^t alpha_+(s) L^dag(-s) ds`` where ``X(s) = e^{iHs} X e^{-iHs}``.
    For Hermitian ``L`` the two kernels merge into ``alpha_T``.

    Parameters
    ----------
    bath : BathSpec, CorrelationSum, callable or (alpha_minus, alpha_plus)
        A bare kernel is taken as ``alpha_minus`` with ``alpha_plus = 0``.
    refine : int
        Sub-grid factor for the trapezoid memory integrals (per half step).
    budget : float
        Refuse runs with ``n_steps**2`` above this value.
    """
    if grid.n_steps**2 > budget:
        coarse = grid.dt * np.sqrt(grid.n_steps**2 / budget)
        raise BudgetError(
            f"TCL2 memory integrals need {grid.n_steps**2:.3g} work units (budget {budget:.3g}); try dt >= {coarse:.3g}",
            requested=grid.n_steps**2,
            budget=budget,
        )
    rho0 = _validated_rho(rho0, system.dim)
    L = system.coupling(coupling_index)
    hermitian = bool(np.max(np.abs(L - L.conj().T)) < 1e-12)
    k_minus, k_plus = _kernel_pair(bath, hermitian)
    e, u = np.linalg.eigh(system.H)
    le = u.conj().T @ L @ u
    bohr = e[:, None] - e[None, :]
    uniq, inv = np.unique(np.round(bohr, 12), return_inverse=True)
    inv = inv.reshape(bohr.shape)
    half = grid.refine(2)
    rel = half.times - grid.t0
    phi_m = le[None] * _cumulative_transform(k_minus, uniq, rel, refine)[inv].transpose(2, 0, 1)
    if k_plus is not None:
        phi_p = le.conj().T[None] * _cumulative_transform(k_plus, uniq, rel, refine)[inv].transpose(2, 0, 1)
    else:
        phi_p = None
    led = le.conj().T
    rho_e = u.conj().T @ rho0 @ u

    def rhs_full(t, r):
        j = int(round(2.0 * (t - grid.t0) / grid.dt))
        a = phi_m[j] @ r
        gen = a @ led - led @ a
        if phi_p is not None:
            b = phi_p[j] @ r
            gen = gen + (b @ le - le @ b)
        return -1j * (bohr * r) + gen + gen.conj().T

    states_e = integrate(rhs_full, rho_e, grid)
    states = u @ states_e @ u.conj().T
    if check:
        check_trajectory(states, tol_tr=1e-8, tol_herm=1e-10, t=grid.times)
    return Trajectory(grid.times, states)


# --- secular Markov limit -----------------------------------------------------------


def _eigen_components(H, op):
    """Split ``op`` into ``op(w) = sum_{e_m - e_n = -w} P_m op P_n`` (energy-lowering for ``w > 0``)."""
    e, u = np.linalg.eigh(H)
    gaps = np.diff(e)
    if gaps.size and np.min(gaps) < TOL_DEGENERATE:
        raise ConfigError("secular approximation needs a nondegenerate H_S spectrum")
    w = e[None, :] - e[:, None]  # w[m, n] = e_n - e_m: transition n -> m lowers energy by w
    off = np.abs(w[np.triu_indices(len(e), 1)])
    if off.size > 1:
        srt = np.sort(off)
        if np.min(np.diff(srt)) < TOL_DEGENERATE:
            raise ConfigError("secular approximation needs pairwise distinct Bohr frequencies")
    oe = u.conj().T @ op @ u
    comps = {}
    for m in range(len(e)):
        for n in range(len(e)):
            if abs(oe[m, n]) < 1e-14:
                continue
            key = round(float(w[m, n]), 12)
            mat = comps.setdefault(key, np.zeros_like(oe))
            mat[m, n] = oe[m, n]
    return {k: u @ v @ u.conj().T for k, v in comps.items()}


def _two_sided(f_pos, f_neg):
    """Spectral function on the real line from its two half-lines."""

    def s(nu):
        if nu > 0:
            return f_pos(nu)
        if nu < 0:
            return f_neg(-nu)
        return 0.5 * (f_pos(1e-300) + f_neg(1e-300))

    return s


def half_fourier_rate(spec_fn, omega: float, top: float, tail: bool) -> complex:
    """``Gamma(w) = int_0^inf e^{i w tau} C(tau) d tau`` for ``C(tau) = int S(nu) e^{-i nu tau} d nu``.

    Equals ``pi S(w) - i P int S(nu) / (nu - w) d nu``; the principal value uses
    QUADPACK's Cauchy-weight rule on ``[-top, top]`` plus plain tails when ``tail``.
    """
    def safe(nu):
        with np.errstate(all="ignore"):
            v = spec_fn(nu)
        return float(v) if np.isfinite(v) else 0.0

    scale = _quad(lambda x: abs(safe(x)), -top, top, scale=1e-30, what="rate scale") or 1.0
    if abs(omega) < top:
        pv = _quad(safe, -top, top, weight="cauchy", wvar=omega, scale=scale, what="principal value")
    else:
        pv = _quad(lambda x: safe(x) / (x - omega), -top, top, scale=scale, what="rate integral")
    if tail:
        pv += _quad(lambda x: safe(x) / (x - omega), top, np.inf, scale=scale, what="rate tail")
        pv += _quad(lambda x: safe(x) / (x - omega), -np.inf, -top, scale=scale, what="rate tail")
    return complex(np.pi * safe(omega), -pv)


def _spectral_pieces(bath: BathSpec):
    J = bath.J

    def n(w):
        return 0.0 if bath.zero_temperature else 1.0 / np.expm1(bath.beta * w)

    f_minus = lambda w: float(J(w)) * (n(w) + 1.0)  # noqa: E731
    f_plus = lambda w: float(J(w)) * n(w)  # noqa: E731
    if isinstance(J, Drude) and J.omega_max is None:
        top, tail = 200.0 * J.gamma, True
    else:
        top, tail = J.finite_support(), False
    return f_minus, f_plus, top, tail


def secular_markov_generator(system: SystemSpec, bath: BathSpec, *, coupling_index: int = 0,
                             rate_tol: float = 1e-12) -> LindbladSpec:
    """Secular Born-Markov generator in Lindblad form with Lamb shift.

    Channels are the eigen-components ``L(w)`` (rate ``Re Gamma_-(w)``) and, for
    non-Hermitian ``L``, ``L(w)^dag`` (rate ``Re Gamma_+(w)``). For Hermitian ``L`` the
    two pieces act on the same operator and merge into one two-sided spectrum
    ``S(nu) = J(nu)(n + 1)`` for ``nu > 0`` and ``J(|nu|) n(|nu|)`` for ``nu < 0``,
    which gives ``Re Gamma(-w) = exp(-beta w) Re Gamma(w)``.

    The Lamb shift is ``sum_w Im Gamma(w) C(w)^dag C(w)``.
    """
    bath.require_bosonic()
    L = system.coupling(coupling_index)
    f_minus, f_plus, top, tail = _spectral_pieces(bath)
    hermitian = bool(np.max(np.abs(L - L.conj().T)) < 1e-12)
    comps = _eigen_components(system.H, L)
    chans, rates, freqs = [], [], []
    shift = np.zeros_like(system.H)
    if hermitian:
        pieces = [(comps, _two_sided(f_minus, f_plus), 1.0)]
    else:
        zero = lambda w: 0.0  # noqa: E731
        comps_dag = _eigen_components(system.H, L.conj().T)
        pieces = [(comps, _two_sided(f_minus, zero), 1.0), (comps_dag, _two_sided(zero, f_plus), 1.0)]
    for comp, s_fn, _ in pieces:
        for w in sorted(comp):
            gam = half_fourier_rate(s_fn, w, top, tail)
            if gam.real < -rate_tol:
                raise KernelError(f"negative secular rate {gam.real:.3e} at w = {w}")
            c = comp[w]
            chans.append(c)
            rates.append(max(gam.real, 0.0))
            freqs.append(w)
            shift = shift + gam.imag * (c.conj().T @ c)
    return LindbladSpec(system, tuple(rates), tuple(chans), 0.5 * (shift + shift.conj().T), tuple(freqs))


# --- quantum regression --------------------------------------------------------------


def _rk4_span(sup, v, span: float, dt: float):
    if span == 0:
        return v
    n = max(1, int(np.ceil(span / dt - 1e-9)))
    return integrate(lambda t, y: sup @ y, v, TimeGrid(0.0, span / n, n))[-1]


def qrt_two_time(spec: LindbladSpec, A, B, rho0, t2: float, t1: float, dt: float = 1e-3) -> complex:
    """``<A(t1) B(t2)>`` for ``t1 >= t2`` by the quantum regression theorem."""
    if t1 < t2:
        raise ValueError("qrt_two_time needs t1 >= t2")
    rho0 = _validated_rho(rho0, spec.system.dim)
    sup = liouvillian(spec)
    d = spec.system.dim
    rho_t2 = unvec(_rk4_span(sup, vec(rho0), t2, dt), d)
    x = unvec(_rk4_span(sup, vec(np.asarray(B) @ rho_t2), t1 - t2, dt), d)
    return complex(np.trace(np.asarray(A) @ x))


# --- NIBA ----------------------------------------------------------------------------


def niba_q_integrals(J: SpectralDensity, beta: float, s: float) -> tuple[float, float]:
    """``Q_1(s) = int sin(w s) J / w^2`` and ``Q_2(s) = int (1 - cos w s) coth(beta w / 2) J / w^2``."""
    if s == 0:
        return 0.0, 0.0
    top = 1000.0 * J.gamma if isinstance(J, Drude) and J.omega_max is None else J.finite_support()
    coth = (lambda w: 1.0) if np.isinf(beta) else (lambda w: 1.0 / np.tanh(0.5 * beta * w))

    def g(w):
        w = max(w, 1e-300)
        with np.errstate(all="ignore"):
            return float(J(w)) / w**2

    a = min(1.0 / abs(s), top)
    scale1 = _quad(lambda w: abs(np.sin(w * s)) * g(w), 0.0, a, scale=1e-30, what="Q1") + 1e-300
    q1 = _quad(lambda w: np.sin(w * s) * g(w), 0.0, a, scale=scale1, what="Q1")
    q2 = _quad(lambda w: (1 - np.cos(w * s)) * coth(max(w, 1e-300)) * g(w), 0.0, a, scale=scale1, what="Q2")
    if a < top:
        q1 += _quad(g, a, top, weight="sin", wvar=s, scale=scale1, what="Q1")
        gc = lambda w: coth(w) * g(w)  # noqa: E731
        q2 += _quad(gc, a, top, scale=scale1, what="Q2") - _quad(gc, a, top, weight="cos", wvar=s, scale=scale1, what="Q2")
    return q1, q2


def niba_kernel(delta0: float, J: SpectralDensity, beta: float, lags) -> NDArray[np.float64]:
    """``f(s) = Delta_0^2 cos(Q_1(s) / pi) exp(-Q_2(s) / pi)``."""
    out = np.empty(len(lags))
    for k, s in enumerate(lags):
        q1, q2 = niba_q_integrals(J, beta, float(s))
        out[k] = delta0**2 * np.cos(q1 / np.pi) * np.exp(-q2 / np.pi)
    return out


def niba_evolve(delta0: float, J: SpectralDensity | None, beta: float, grid: TimeGrid) -> NDArray[np.float64]:
    """``P(t) = <sigma_z>`` from ``dP/dt = -int_0^t f(t - s) P(s) ds`` with ``P(0) = 1``.

    ``J = None`` means no bath (``f = Delta_0^2``). The memory integral starts at 0
    (factorized preparation at ``t = 0``).
    """
    lags = grid.dt * np.arange(grid.n_steps + 1)
    if delta0 == 0:
        return np.ones(grid.n_steps + 1)
    if J is None:
        f = np.full(lags.shape, float(delta0) ** 2)
    else:
        f = niba_kernel(delta0, J, beta, lags)
    p, _ = volterra_integrate(f, grid, 1.0)
    return p.real


# --- canonical time-local equation ---------------------------------------------------


def time_local_rhs(spec: TimeLocalSpec):
    def rhs(t, rho):
        h, chans = spec.at(t)
        out = -1j * (h @ rho - rho @ h)
        for c, r in chans:
            if r != 0.0:
                out = out + apply_dissipator(c, rho, r)
        return out

    return rhs


def time_local_evolve(spec: TimeLocalSpec, rho0, grid: TimeGrid, *, substeps: int = 1, check: bool = True) -> Trajectory:
    """Propagate the canonical time-local master equation (rates may be negative).

    Positivity is not asserted: it is guaranteed only while every rate stays nonnegative.
    """
    rho0 = _validated_rho(rho0, spec.system.dim)
    states = integrate(time_local_rhs(spec), rho0, grid, substeps)
    if check:
        check_trajectory(states, tol_tr=1e-8, tol_herm=1e-10, t=grid.times)
    return Trajectory(grid.times, states)
