"""Exactly solvable reference dynamics.

Frame convention: kernels ``alpha(t) = sum g^2 exp(-i (omega_k - omega_s) t)`` carry the
detuning phase; the amplitude ``A(t)`` solves the Volterra equation with that kernel
and ``u(t) = exp(-i omega_s t) A(t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh_tridiagonal

from .bath.correlation import kernel_values
from .bath.spectral import BathSpec
from .chain import gauss_discretize, recurrence_coefficients
from .core import SIGMA_MINUS, TimeGrid, Trajectory, check_density_matrix, volterra_integrate
from .errors import ConfigError, MapNotInvertibleError, NumericalError
from .mastereq import SampledFunction, SystemSpec, TimeLocalSpec

EXCITED_PROJECTOR = (SIGMA_MINUS.conj().T @ SIGMA_MINUS).real.astype(complex)


@dataclass(frozen=True)
class AmplitudeSolution:
    times: NDArray[np.float64]
    A: NDArray[np.complex128]
    Adot: NDArray[np.complex128]
    omega_s: float = 0.0

    @property
    def u(self) -> NDArray[np.complex128]:
        return np.exp(-1j * self.omega_s * self.times) * self.A

    @property
    def udot(self) -> NDArray[np.complex128]:
        return np.exp(-1j * self.omega_s * self.times) * (self.Adot - 1j * self.omega_s * self.A)

    def density_matrices(self, rho0) -> NDArray[np.complex128]:
        """Exact two-level states: ``rho_ee |u|^2``, coherence ``rho_eg u``, basis ``|0> = |e>``."""
        rho0 = np.asarray(rho0, dtype=complex)
        u = self.u
        out = np.empty((len(u), 2, 2), dtype=complex)
        out[:, 0, 0] = rho0[0, 0] * np.abs(u) ** 2
        out[:, 1, 1] = 1.0 - out[:, 0, 0]
        out[:, 0, 1] = rho0[0, 1] * u
        out[:, 1, 0] = np.conj(out[:, 0, 1])
        return out


def one_excitation_amplitude(alpha, grid: TimeGrid, omega_s: float = 0.0, markov_rate: complex = 0.0) -> AmplitudeSolution:
    """Solve ``dA/dt = -int_0^t alpha(t - tau) A(tau) d tau`` with ``A(0) = 1``.

    ``alpha = None`` means no bath. A delta part ``Gamma delta(t)`` of the kernel is
    passed as ``markov_rate = Gamma`` and contributes ``Gamma / 2`` (half of the delta
    sits inside the integration range).

    Raises
    ------
    NumericalError
        If the stepping becomes unstable (use a finer grid).
    """
    if alpha is None:
        kernel = np.zeros(grid.n_steps + 1, dtype=complex)
    else:
        kernel = kernel_values(alpha, grid.dt * np.arange(grid.n_steps + 1))
    y, ydot = volterra_integrate(kernel, grid, 1.0, 0.5 * markov_rate)
    return AmplitudeSolution(grid.times, y, ydot, float(omega_s))


def _first_singular(A: NDArray, times: NDArray, tol: float = 1e-10):
    """Index of the first grid point at or just before a zero of ``A`` (``None`` if none).

    A zero shows up either as ``|A| < tol`` or as a phase jump above ``pi / 2``
    between neighbouring samples (the zero lies between them).
    """
    small = np.flatnonzero(np.abs(A) < tol)
    jump = np.flatnonzero(np.real(A[1:] * np.conj(A[:-1])) < 0)
    cands = []
    if small.size:
        cands.append(int(small[0]))
    if jump.size:
        cands.append(int(jump[0]))
    return min(cands) if cands else None


@dataclass(frozen=True)
class TclRates:
    times: NDArray[np.float64]
    delta: NDArray[np.float64]
    gamma1: NDArray[np.float64]
    amplitude: AmplitudeSolution
    spec: TimeLocalSpec


def exact_tcl_rates(alpha, omega_s: float, grid: TimeGrid) -> TclRates:
    """``Delta = -Im(u'/u)`` and ``gamma_1 = -Re(u'/u)`` for exact amplitude damping.

    The returned ``spec`` is the canonical time-local equation with ``C = sigma_minus``,
    ``H_S = omega_s |e><e|`` and the correction ``(Delta(t) - omega_s) |e><e|``.

    Raises
    ------
    MapNotInvertibleError
        If ``u`` vanishes on the grid; ``time`` is the last grid point before the zero.
    """
    sol = one_excitation_amplitude(alpha, grid, omega_s)
    bad = _first_singular(sol.A, grid.times)
    if bad is not None:
        raise MapNotInvertibleError(
            f"u(t) vanishes near t = {grid.times[bad]:.6g}; the time-local generator does not exist",
            step=bad,
            time=float(grid.times[bad]),
        )
    ratio = sol.Adot / sol.A
    delta = omega_s - ratio.imag
    gamma1 = -ratio.real
    proj = EXCITED_PROJECTOR
    d_fn = SampledFunction(grid.times, delta - omega_s)
    g_fn = SampledFunction(grid.times, gamma1)
    system = SystemSpec(omega_s * proj, (SIGMA_MINUS,), ("sigma_minus",))
    spec = TimeLocalSpec(system, ((SIGMA_MINUS, g_fn),), h_t=lambda t: float(d_fn(t)) * proj)
    return TclRates(grid.times, delta, gamma1, sol, spec)


# --- quantum Brownian motion ---------------------------------------------------------


@dataclass(frozen=True)
class QbmCoefficients:
    times: NDArray[np.float64]
    delta: NDArray[np.float64]
    gamma1: NDArray[np.float64]
    gamma2: NDArray[np.float64]
    u: NDArray[np.complex128]
    v: NDArray[np.float64]
    statistics: str = "bosonic"


def _derivative4(y, h):
    """Fourth-order finite differences (one-sided five-point stencils at the ends)."""
    y = np.asarray(y)
    n = y.size
    if n < 5:
        return np.gradient(y, h)
    d = np.empty_like(y)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return d


def qbm_coefficients(alpha, alpha_plus, omega_s: float, grid: TimeGrid, statistics: str = "bosonic") -> QbmCoefficients:
    """Exact coefficients ``Delta, gamma_1, gamma_2`` of the damped-oscillator master equation.

    ``u`` solves the same Volterra equation as :func:`exact_tcl_rates`;
    ``v(t) = int_0^t int_0^t A(t - s) conj(alpha_plus(s - s')) conj(A(t - s')) ds ds'``
    (the ``omega_s`` phases cancel), evaluated by the 2d trapezoid rule, and
    ``gamma_2 = v' - 2 v Re(u'/u)`` with a fourth-order stencil for ``v'``.
    ``alpha_plus = None`` means zero temperature.
    """
    if statistics not in ("bosonic", "fermionic"):
        raise ConfigError(f"unknown statistics {statistics!r}")
    rates = exact_tcl_rates(alpha, omega_s, grid)
    sol = rates.amplitude
    n, h = grid.n_steps, grid.dt
    v = np.zeros(n + 1)
    if alpha_plus is not None:
        lags = h * np.arange(-n, n + 1)
        ap = np.conj(kernel_values(alpha_plus, lags))
        for k in range(1, n + 1):
            w = np.full(k + 1, h)
            w[0] = w[-1] = 0.5 * h
            x = w * sol.A[k::-1]  # A(t_k - s_i)
            idx = np.arange(k + 1)
            m = ap[n + idx[:, None] - idx[None, :]]  # conj(alpha_plus)(s_i - s_j)
            v[k] = float(np.real(x @ m @ np.conj(x)))
    ratio = sol.Adot / sol.A
    gamma2 = _derivative4(v, h) - 2.0 * v * (ratio.real)
    return QbmCoefficients(grid.times, rates.delta, rates.gamma1, gamma2, sol.u, v, statistics)


# --- pure dephasing ------------------------------------------------------------------


def _dephasing_eigs(system: SystemSpec, coupling_index: int):
    H = system.H
    L = system.coupling(coupling_index)
    if np.max(np.abs(L - L.conj().T)) > 1e-12:
        raise ConfigError("pure dephasing needs a Hermitian coupling")
    if np.max(np.abs(H @ L - L @ H)) > 1e-12:
        raise ConfigError("pure dephasing needs [L, H_S] = 0")
    # Joint eigenbasis: diagonalize L + (small) H, then read off both spectra.
    e_l, u = np.linalg.eigh(L + np.pi * 1e-3 * H / max(1.0, np.max(np.abs(H))))
    l_vals = np.real(np.diag(u.conj().T @ L @ u))
    h_vals = np.real(np.diag(u.conj().T @ H @ u))
    return u, l_vals, h_vals


def dephasing_functions(bath: BathSpec, times) -> tuple[NDArray, NDArray]:
    """``Gamma(t) = int J coth(beta w/2) (1 - cos w t) / w^2`` and ``phi(t) = int J (w t - sin w t) / w^2``."""
    from .bath.correlation import _quad  # shared QUADPACK wrapper

    J = bath.J
    top = float(J.support) if hasattr(J, "support") else J.finite_support()
    beta = bath.beta
    coth = (lambda w: 1.0) if np.isinf(beta) else (lambda w: 1.0 / np.tanh(0.5 * beta * w))
    gam = np.zeros(len(times))
    phi = np.zeros(len(times))
    for k, t in enumerate(times):
        if t == 0:
            continue

        def g1(w, t=t):
            w = max(w, 1e-300)
            # (1 - cos wt) / w^2 written without cancellation
            return float(J(w)) * coth(w) * 0.5 * t * t * np.sinc(w * t / (2 * np.pi)) ** 2

        def g2(w, t=t):
            x = w * t
            r = x**3 / 6 - x**5 / 120 if x < 1e-2 else x - np.sin(x)
            return float(J(w)) * r / max(w, 1e-300) ** 2

        a = min(1.0 / abs(t), top)
        for f, out in ((g1, gam), (g2, phi)):
            val = _quad(f, 0.0, a, what="dephasing function")
            if a < top:
                val += _quad(f, a, top, what="dephasing function")
            out[k] = val
    return gam, phi


def star_dephasing_factor(bath: BathSpec, l_n: float, l_m: float, times, n_modes: int = 200,
                          fock_cap: int = 1500):
    """Brute-force coherence factor from a Gauss-discretized star bath.

    Each mode ``(w_p, g_p = sqrt(W_p))`` is an oscillator truncated in Fock space;
    the factor is ``prod_p Tr[rho_th,p exp(i H_m t) exp(-i H_n t)]`` with
    ``H_n = w b^dag b + l_n g (b + b^dag)``, computed by exact diagonalization.
    The per-mode truncation keeps the thermal tail below ``1e-12`` and covers the
    displacement ``l g / w``.

    Raises
    ------
    NumericalError
        If a mode needs more than ``fock_cap`` levels (too cold a cutoff for the
        lowest nodes: raise ``beta`` or lower ``n_modes``).
    """
    star = gauss_discretize(recurrence_coefficients(bath.J, n_modes))
    times = np.asarray(times, dtype=float)
    out = np.ones(times.size, dtype=complex)
    lmax = max(abs(l_n), abs(l_m))
    for w, weight in zip(star.nodes, star.weights):
        g = np.sqrt(weight)
        disp = (lmax * g / w) ** 2
        n_th = 0 if np.isinf(bath.beta) else int(np.ceil(np.log(1e12) / (bath.beta * w)))
        n_fock = max(24, n_th + int(np.ceil(12 * (1 + disp))) + 16)
        if n_fock > fock_cap:
            raise NumericalError(f"mode at w = {w:.3g} needs {n_fock} Fock levels (cap {fock_cap})")
        levels = np.arange(n_fock, dtype=float)
        if np.isinf(bath.beta):
            pth = (levels == 0).astype(float)
        else:
            pth = np.exp(-bath.beta * w * levels)
            pth /= pth.sum()
        off = np.sqrt(levels[1:])
        en, vn = eigh_tridiagonal(w * levels, l_n * g * off)
        em, vm = eigh_tridiagonal(w * levels, l_m * g * off)
        overlap = vm.T @ vn
        for k, t in enumerate(times):
            # diagonal of exp(i H_m t) exp(-i H_n t) in the Fock basis
            um = (vm * np.exp(1j * em * t)) @ overlap
            un = vn * np.exp(-1j * en * t)
            out[k] *= np.einsum("a,ak,ak->", pth, um, un)
    return out


def dephasing_exact(system: SystemSpec, bath: BathSpec, rho0, grid: TimeGrid, *, coupling_index: int = 0,
                    method: str = "analytic", n_modes: int = 200) -> Trajectory:
    """Exact pure-dephasing dynamics for ``[L, H_S] = 0``.

    In the joint eigenbasis (``L|n> = l_n|n>``) the coherences evolve as
    ``rho_nm(t) = rho_nm(0) exp(-i(E_n - E_m)t - (l_n - l_m)^2 Gamma(t) + i (l_n^2 - l_m^2) phi(t))``.
    ``method="star"`` replaces the continuum factors with :func:`star_dephasing_factor`.
    """
    bath.require_bosonic()
    rho0 = check_density_matrix(rho0)
    u, l_vals, h_vals = _dephasing_eigs(system, coupling_index)
    t = grid.times
    rel = t - grid.t0
    d = system.dim
    r0 = u.conj().T @ rho0 @ u
    states = np.empty((t.size, d, d), dtype=complex)
    if method == "analytic":
        gam, phi = dephasing_functions(bath, rel)
    elif method != "star":
        raise ConfigError(f"unknown dephasing method {method!r}")
    for n in range(d):
        for m in range(d):
            free = np.exp(-1j * (h_vals[n] - h_vals[m]) * rel)
            if n == m:
                fac = np.ones(t.size, dtype=complex)
            elif method == "analytic":
                fac = np.exp(-(l_vals[n] - l_vals[m]) ** 2 * gam + 1j * (l_vals[n] ** 2 - l_vals[m] ** 2) * phi)
            else:
                fac = star_dephasing_factor(bath, l_vals[n], l_vals[m], rel, n_modes)
            states[:, n, m] = r0[n, m] * free * fac
    states = u[None] @ states @ u.conj().T[None]
    return Trajectory(t, states)


def amplitude_damping_map(sol: AmplitudeSolution) -> NDArray[np.complex128]:
    """Block-form superoperators of the exact qubit map, shape ``(n_t, 4, 4)``.

    Column-stacking order ``(ee, ge, eg, gg)`` with ``|0> = |e>``.
    """
    u = sol.u
    p = np.abs(u) ** 2
    maps = np.zeros((u.size, 4, 4), dtype=complex)
    maps[:, 0, 0] = p
    maps[:, 3, 0] = 1.0 - p
    maps[:, 3, 3] = 1.0
    maps[:, 1, 1] = np.conj(u)
    maps[:, 2, 2] = u
    return maps
