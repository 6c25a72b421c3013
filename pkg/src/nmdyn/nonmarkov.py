"""Dynamical maps and non-Markovianity diagnostics.

Maps are ``d^2 x d^2`` superoperators on column-stacked operators (see :mod:`nmdyn.core`).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize

from .core import gell_mann_basis, trace_norm, unvec, vec
from .errors import ConfigError, InvariantError, MapNotInvertibleError, NumericalError

COND_LIMIT = 1e10


@dataclass(frozen=True)
class DynamicalMap:
    """``Lambda_k`` at ``times[k]`` with ``times[0] = 0`` and ``Lambda_0 = 1``."""

    times: NDArray[np.float64]
    maps: NDArray[np.complex128]

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.maps.shape[1])))

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def apply(self, rho) -> NDArray[np.complex128]:
        v = vec(rho)
        d = self.dim
        return np.array([unvec(m @ v, d) for m in self.maps])


def _state_basis(d: int) -> list[NDArray]:
    """``d^2`` density matrices spanning all operators: ``|i><i|`` and two superpositions per pair."""
    out = []
    eye = np.eye(d, dtype=complex)
    for i in range(d):
        out.append(np.outer(eye[i], eye[i]))
    for i in range(d):
        for j in range(i + 1, d):
            for phase in (1.0, 1j):
                v = (eye[i] + phase * eye[j]) / np.sqrt(2.0)
                out.append(np.outer(v, v.conj()))
    return out


def _states_of(result) -> NDArray[np.complex128]:
    return np.asarray(getattr(result, "states", result), dtype=complex)


def build_map(solver, d: int, *, check_rho=None, tol_tp: float = 1e-8, tol_linear: float = 1e-6) -> DynamicalMap:
    """Assemble ``Lambda(t_k)`` from ``d^2`` runs of a linear solver.

    ``solver(rho0)`` must return the states on a common grid (an array of shape
    ``(n_t, d, d)`` or an object with ``times`` and ``states``).

    Raises
    ------
    InvariantError
        If a map is not trace preserving within ``tol_tp``.
    NumericalError
        If a direct run from ``check_rho`` (a random state by default) differs from
        the assembled map by more than ``tol_linear``.
    """
    basis = _state_basis(d)
    runs = [solver(b) for b in basis]
    times = np.asarray(getattr(runs[0], "times", np.arange(len(_states_of(runs[0])))), dtype=float)
    outs = np.stack([_states_of(r) for r in runs])  # (d^2, n_t, d, d)
    vin = np.stack([vec(b) for b in basis], axis=1)  # columns vec(B_a)
    vout = outs.transpose(1, 0, 3, 2).reshape(outs.shape[1], d * d, d * d)  # (n_t, a, vec index)
    vout = np.swapaxes(vout, 1, 2)  # columns vec(Lambda B_a)
    maps = vout @ np.linalg.inv(vin)
    tr_row = vec(np.eye(d)).conj()
    tp = np.max(np.abs(tr_row @ maps - tr_row[None, :]))
    if tp > tol_tp:
        raise InvariantError(f"map is not trace preserving (deviation {tp:.3e})", residual=tp)
    if check_rho is None:
        rng = np.random.default_rng(12345)
        x = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        check_rho = x @ x.conj().T
        check_rho /= np.trace(check_rho)
    direct = _states_of(solver(check_rho))
    via = np.einsum("tij,j->ti", maps, vec(check_rho))
    err = np.max(np.abs(via - direct.transpose(0, 2, 1).reshape(len(times), -1)))
    if err > tol_linear:
        raise NumericalError(f"solver is not linear in rho0 (mismatch {err:.3e})", residual=err)
    return DynamicalMap(times, maps)


def trace_distance(rho1, rho2) -> float:
    """``||rho1 - rho2||_1 / 2``."""
    a, b = np.asarray(rho1, dtype=complex), np.asarray(rho2, dtype=complex)
    if a.shape != b.shape:
        raise ConfigError("states must have the same dimension")
    return 0.5 * trace_norm(a - b)


# --- BLP -----------------------------------------------------------------------------


@dataclass(frozen=True)
class BLPResult:
    value: float
    pair: tuple
    distance: NDArray[np.float64]
    sigma: NDArray[np.float64]


def _pair_curve(dmap: DynamicalMap, rho1, rho2):
    diff = vec(np.asarray(rho1, dtype=complex) - np.asarray(rho2, dtype=complex))
    d = dmap.dim
    out = (dmap.maps @ diff).reshape(-1, d, d)  # rows hold transposed operators; singular values agree
    dist = 0.5 * np.linalg.svd(out, compute_uv=False).sum(axis=-1)
    sigma = np.gradient(dist, dmap.times)
    floor = 64 * np.finfo(float).eps * max(1.0, float(np.max(dist))) / dmap.dt
    sigma = np.where(np.abs(sigma) < floor, 0.0, sigma)
    return dist, sigma


def _positive_integral(sigma, times) -> float:
    return float(np.trapezoid(np.clip(sigma, 0.0, None), times))


def bloch_pair(n) -> tuple:
    from .core import SIGMA_X, SIGMA_Y, SIGMA_Z

    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    s = n[0] * SIGMA_X + n[1] * SIGMA_Y + n[2] * SIGMA_Z
    eye = np.eye(2)
    return 0.5 * (eye + s), 0.5 * (eye - s)


def _fibonacci_directions(n: int) -> NDArray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def blp_measure(dmap: DynamicalMap, pairs=None, *, n_directions: int = 60, refine: bool = True) -> BLPResult:
    """Largest integrated increase of the trace distance over state pairs.

    For qubits the default pairs are antipodal pure states along ``n_directions``
    Bloch directions, followed by a local refinement of the best one. Other
    dimensions need explicit ``pairs``.
    """
    if pairs is None:
        if dmap.dim != 2:
            raise ConfigError("built-in pair search is for qubits; pass pairs for d > 2")

        def score(n):
            r1, r2 = bloch_pair(n)
            return _positive_integral(_pair_curve(dmap, r1, r2)[1], dmap.times)

        dirs = _fibonacci_directions(n_directions)
        vals = np.array([score(n) for n in dirs])
        best = dirs[int(np.argmax(vals))]
        if refine and vals.max() > 0:
            theta, phi = np.arccos(np.clip(best[2], -1, 1)), np.arctan2(best[1], best[0])

            def neg(x):
                return -score([np.sin(x[0]) * np.cos(x[1]), np.sin(x[0]) * np.sin(x[1]), np.cos(x[0])])

            opt = minimize(neg, [theta, phi], method="Nelder-Mead", options=dict(xatol=1e-4, fatol=1e-12))
            if -opt.fun > vals.max():
                x = opt.x
                best = np.array([np.sin(x[0]) * np.cos(x[1]), np.sin(x[0]) * np.sin(x[1]), np.cos(x[0])])
        pairs = [bloch_pair(best)]
    best_val, best_pair, best_curve = -1.0, None, None
    for r1, r2 in pairs:
        dist, sigma = _pair_curve(dmap, r1, r2)
        val = _positive_integral(sigma, dmap.times)
        if val > best_val:
            best_val, best_pair, best_curve = val, (r1, r2), (dist, sigma)
    dist, sigma = best_curve
    signs = np.sign(sigma[np.abs(sigma) > 0])
    if signs.size > 8 and np.mean(signs[1:] != signs[:-1]) > 0.25:
        warnings.warn("trace-distance derivative changes sign at most steps; the grid may be too coarse",
                      RuntimeWarning, stacklevel=2)
    return BLPResult(best_val, best_pair, dist, sigma)


# --- RHP -----------------------------------------------------------------------------


@dataclass(frozen=True)
class RHPResult:
    value: float
    times: NDArray[np.float64]
    g: NDArray[np.float64]


def _checked_inverse(m, t):
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise MapNotInvertibleError(f"dynamical map is singular at t = {t:.6g} (condition {cond:.3e})", time=float(t))
    return np.linalg.inv(m)


def choi_matrix(superop, d: int) -> NDArray[np.complex128]:
    """``(Lambda (x) id)(|Phi><Phi|)`` for the maximally entangled ``|Phi> = sum_i |ii> / sqrt(d)``."""
    out = np.zeros((d * d, d * d), dtype=complex)
    for i in range(d):
        for j in range(d):
            e = np.zeros((d, d), dtype=complex)
            e[i, j] = 1.0
            out += np.kron(unvec(superop @ vec(e), d), e)
    return out / d


def rhp_measure(dmap: DynamicalMap) -> RHPResult:
    """``g(t_k) = (||Choi(Lambda_{k+1} Lambda_k^-1)||_1 - 1) / dt`` and ``N = int max(g, 0)``.

    ``g`` is reported at the left end of each step.

    Raises
    ------
    MapNotInvertibleError
        If some ``Lambda_k`` is singular (condition number above ``1e10``).
    """
    d, dt = dmap.dim, dmap.dt
    g = np.empty(len(dmap.times) - 1)
    for k in range(len(g)):
        inter = dmap.maps[k + 1] @ _checked_inverse(dmap.maps[k], dmap.times[k])
        g[k] = (trace_norm(choi_matrix(inter, d)) - 1.0) / dt
    g = np.where(np.abs(g) < 1e-9, 0.0, g)
    return RHPResult(float(np.sum(np.clip(g, 0.0, None)) * dt), dmap.times[:-1], g)


# --- canonical rates -----------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalRates:
    """``Delta_k(t)`` (ascending), channels ``C_k(t)`` and ``H(t)`` of the canonical form.

    Rates follow the package convention ``Delta (2 C rho C^dag - {C^dag C, rho})``.
    """

    times: NDArray[np.float64]
    rates: NDArray[np.float64]
    channels: NDArray[np.complex128]
    hamiltonians: NDArray[np.complex128]
    hermiticity_residual: NDArray[np.float64]


def operator_basis(d: int) -> NDArray[np.complex128]:
    """``G_0 = 1/sqrt(d)`` followed by the orthonormal traceless Gell-Mann matrices."""
    return gell_mann_basis(d)


def map_generator(dmap: DynamicalMap) -> NDArray[np.complex128]:
    """``L(t_k) = dLambda/dt Lambda^-1`` with second-order differences."""
    deriv = np.gradient(dmap.maps, dmap.times, axis=0, edge_order=2)
    return np.array([dv @ _checked_inverse(m, t) for dv, m, t in zip(deriv, dmap.maps, dmap.times)])


def decompose_generator(gen, basis) -> tuple:
    """Coefficients ``c_ij`` with ``L(rho) = sum c_ij G_i rho G_j^dag`` and the implied Hamiltonian."""
    d = basis.shape[1]
    n = basis.shape[0]
    c = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            sup = np.kron(basis[j].conj(), basis[i])
            c[i, j] = np.vdot(sup, gen)
    f = np.einsum("i,iab->ab", c[1:, 0], basis[1:]) / np.sqrt(d) + c[0, 0] / (2 * d) * np.eye(d)
    h = 0.5j * (f - f.conj().T)
    return c, h


def canonical_rates(dmap: DynamicalMap, *, basis=None, herm_tol: float = 1e-6) -> CanonicalRates:
    """Canonical decoherence rates, channels and Hamiltonian at every map time.

    The decoherence matrix ``c_ij`` (``i, j >= 1``) is diagonalized as
    ``U diag(gamma) U^dag``; the channels are ``C_k = sum_i U_ik G_i`` and the
    rates ``Delta_k = gamma_k / 2`` in the package's factor-2 convention.
    A ``RuntimeWarning`` reports decoherence matrices that are not Hermitian
    within ``herm_tol``.
    """
    d = dmap.dim
    basis = operator_basis(d) if basis is None else np.asarray(basis, dtype=complex)
    gens = map_generator(dmap)
    n = basis.shape[0] - 1
    rates = np.empty((len(gens), n))
    chans = np.empty((len(gens), n, d, d), dtype=complex)
    hams = np.empty((len(gens), d, d), dtype=complex)
    resid = np.empty(len(gens))
    for k, gen in enumerate(gens):
        c, h = decompose_generator(gen, basis)
        dm = c[1:, 1:]
        resid[k] = np.max(np.abs(dm - dm.conj().T))
        gam, u = np.linalg.eigh(0.5 * (dm + dm.conj().T))
        rates[k] = 0.5 * gam
        chans[k] = np.einsum("ik,iab->kab", u, basis[1:])
        hams[k] = h
    if np.max(resid) > herm_tol:
        warnings.warn(f"decoherence matrix not Hermitian (residual {np.max(resid):.3e})", RuntimeWarning,
                      stacklevel=2)
    return CanonicalRates(dmap.times, rates, chans, hams, resid)
