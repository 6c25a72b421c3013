"""Orthogonal-polynomial chain mapping of a harmonic bath.

The spectral density is rescaled to ``x = omega / omega_c`` on ``[0, 1]`` with
``omega_c`` the upper end of its support.  Monic recurrence coefficients of the
weight ``w(x) = omega_c J(omega_c x)`` give

- Gauss nodes and weights (the star discretization),
- chain energies ``A_n = omega_c alpha_n`` and hoppings ``B_n = omega_c sqrt(beta_n)``,
- the system-chain coupling ``sqrt(beta_0)`` with ``beta_0 = int J d omega``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh_tridiagonal

from .bath.spectral import Drude, SpectralDensity, Tabulated
from .core import TimeGrid
from .errors import NumericalError


@dataclass(frozen=True)
class ChainCoefficients:
    """Monic recurrence data in the rescaled variable plus the rescale ``omega_c``.

    ``betas[0]`` is the zeroth moment ``int J d omega``; ``betas[n >= 1]`` are
    dimensionless.
    """

    alphas: NDArray[np.float64]
    betas: NDArray[np.float64]
    omega_c: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        b = np.asarray(self.betas, dtype=float)
        if a.shape != b.shape or a.ndim != 1 or a.size < 1:
            raise ValueError("alphas and betas must be 1d arrays of equal nonzero length")
        if np.any(b <= 0):
            raise ValueError("recurrence betas must be positive")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "betas", b)

    @property
    def order(self) -> int:
        return self.alphas.size

    @property
    def sys_coupling(self) -> float:
        return float(np.sqrt(self.betas[0]))

    @property
    def energies(self) -> NDArray[np.float64]:
        return self.omega_c * self.alphas

    @property
    def hoppings(self) -> NDArray[np.float64]:
        """``B_n = omega_c sqrt(beta_n)`` for ``n >= 1`` (``B_n`` couples sites ``n - 1`` and ``n``)."""
        return self.omega_c * np.sqrt(self.betas[1:])


@dataclass(frozen=True)
class StarDiscretization:
    nodes: NDArray[np.float64]
    weights: NDArray[np.float64]

    @property
    def order(self) -> int:
        return self.nodes.size


@dataclass(frozen=True)
class ChainData:
    """Tight-binding chain: site energies, nearest-neighbour hoppings, system coupling."""

    energies: NDArray[np.float64]
    hoppings: NDArray[np.float64]
    sys_coupling: float


def _support(J: SpectralDensity) -> float:
    if isinstance(J, Drude) and J.omega_max is None:
        raise ValueError("chain mapping needs a finite support; set omega_max on the Drude density")
    return float(J.finite_support())


def discretized_measure(J: SpectralDensity, n_nodes: int, per_panel: int = 8):
    """Composite Gauss-Legendre nodes/weights of ``w(x) = omega_c J(omega_c x)`` on ``[0, 1]``.

    Panels are uniform, with geometric refinement towards ``x = 0`` (where the
    Ohmic family is not smooth) and breakpoints at tabulated samples.
    """
    top = _support(J)
    n_panels = max(16, int(np.ceil(n_nodes / per_panel)))
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    fine0 = edges[1] * np.geomspace(1e-6, 1.0, 24)
    edges = np.union1d(edges, fine0)
    if isinstance(J, Tabulated):
        edges = np.union1d(edges, np.clip(J.omega / top, 0.0, 1.0))
    xg, wg = np.polynomial.legendre.leggauss(per_panel)
    left, right = edges[:-1], edges[1:]
    half = 0.5 * (right - left)
    x = (left[:, None] + half[:, None] * (xg[None, :] + 1.0)).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    weight = top * np.asarray(J(top * x), dtype=float) * w
    keep = weight > 0
    return x[keep], weight[keep], top


def stieltjes(x, w, n: int):
    """Discretized Stieltjes procedure for the discrete measure ``sum_k w_k delta(x - x_k)``.

    Returns monic ``alpha_0..alpha_{n-1}``, ``beta_0..beta_{n-1}`` with ``beta_0 = sum w``.
    Works with normalized polynomials to avoid overflow.
    """
    alphas = np.zeros(n)
    betas = np.zeros(n)
    betas[0] = w.sum()
    p_prev = np.zeros_like(x)
    p = np.ones_like(x) / np.sqrt(betas[0])
    for k in range(n):
        alphas[k] = np.sum(w * x * p * p)
        if k == n - 1:
            break
        q = (x - alphas[k]) * p - (np.sqrt(betas[k]) if k > 0 else 0.0) * p_prev
        nq = np.sum(w * q * q)
        if not (nq > 0) or not np.isfinite(nq):
            raise NumericalError(f"recurrence coefficient beta_{k + 1} lost positivity (value {nq:.3e})", step=k + 1)
        betas[k + 1] = nq
        p_prev, p = p, q / np.sqrt(nq)
    return alphas, betas


def recurrence_coefficients(J: SpectralDensity, N: int, oversample: int = 16) -> ChainCoefficients:
    """Monic three-term recurrence coefficients of ``J`` (rescaled to ``[0, 1]``).

    The measure is discretized with at least ``oversample * N`` nodes.

    Raises
    ------
    NumericalError
        If some ``beta_n`` is not positive (the error carries ``n`` as ``step``).
    """
    if N < 1:
        raise ValueError("chain order N must be >= 1")
    if oversample < 8:
        raise ValueError("oversample must be at least 8")
    x, w, top = discretized_measure(J, oversample * N)
    if x.size < 2 * N:
        raise NumericalError("spectral density support has too few quadrature nodes for this order")
    a, b = stieltjes(x, w, N)
    return ChainCoefficients(a, b, top)


def monic_polynomials(coeffs: ChainCoefficients, x, n_max: int | None = None) -> NDArray[np.float64]:
    """``pi_0..pi_{n_max}`` at rescaled ``x`` from ``pi_{k+1} = (x - alpha_k) pi_k - beta_k pi_{k-1}``."""
    n_max = coeffs.order if n_max is None else n_max
    x = np.asarray(x, dtype=float)
    out = np.zeros((n_max + 1,) + x.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = x - coeffs.alphas[0]
    for k in range(1, n_max):
        out[k + 1] = (x - coeffs.alphas[k]) * out[k] - coeffs.betas[k] * out[k - 1]
    return out


def jacobi_matrix(coeffs: ChainCoefficients):
    """Diagonal and off-diagonal of the symmetric Jacobi matrix (rescaled variable)."""
    return coeffs.alphas.copy(), np.sqrt(coeffs.betas[1:])


def gauss_discretize(coeffs: ChainCoefficients) -> StarDiscretization:
    """Gauss nodes ``omega_p`` and weights ``W_p = beta_0 q_{0p}^2`` of order ``N``."""
    d, e = jacobi_matrix(coeffs)
    try:
        if d.size == 1:
            nodes, vecs = d.copy(), np.ones((1, 1))
        else:
            nodes, vecs = eigh_tridiagonal(d, e)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Jacobi eigenproblem failed: {exc}") from exc
    weights = coeffs.betas[0] * vecs[0] ** 2
    return StarDiscretization(coeffs.omega_c * nodes, weights)


def star_to_chain(coeffs: ChainCoefficients) -> ChainData:
    """Tight-binding parameters ``A_n``, ``B_n`` and the system coupling ``sqrt(int J)``."""
    return ChainData(coeffs.energies, coeffs.hoppings, coeffs.sys_coupling)


# --- one-excitation propagation ------------------------------------------------------


@dataclass(frozen=True)
class ChainAmplitude:
    """System-site amplitude in the frame rotating at ``omega_s``.

    ``norm_error`` is the largest deviation of the total norm from 1;
    ``recurrence_time`` estimates when the reflection from the chain end returns
    to the system (``inf`` if the end site was never reached).
    """

    times: NDArray[np.float64]
    A: NDArray[np.complex128]
    norm_error: float
    recurrence_time: float


def _propagate_single(H, grid: TimeGrid, omega_s: float, end_site: int | None):
    e, v = np.linalg.eigh(H)
    c0 = v[0].conj()
    t = grid.times
    phases = np.exp(-1j * np.outer(t, e))
    amps = (phases * c0[None, :]) @ v.T  # amplitudes on every site, shape (n_t, dim)
    norm_err = float(np.max(np.abs(np.sum(np.abs(amps) ** 2, axis=1) - 1.0)))
    rec = np.inf
    if end_site is not None:
        hit = np.flatnonzero(np.abs(amps[:, end_site]) ** 2 > 1e-8)
        if hit.size:
            rec = 2.0 * float(t[hit[0]] - t[0])
    return np.exp(1j * omega_s * t) * amps[:, 0], norm_err, rec


def chain_propagate_one_excitation(omega_s: float, chain: ChainData, n_sites: int, grid: TimeGrid) -> ChainAmplitude:
    """Unitary dynamics of one excitation starting on the system site of the chain model.

    Warns (``RuntimeWarning``) when the estimated return time of the reflection
    from the chain end falls inside the grid.
    """
    if n_sites < 1 or n_sites > chain.energies.size:
        raise ValueError(f"n_sites must be in [1, {chain.energies.size}]")
    dim = n_sites + 1
    H = np.zeros((dim, dim))
    H[0, 0] = omega_s
    H[1:, 1:] = np.diag(chain.energies[:n_sites])
    H[0, 1] = H[1, 0] = chain.sys_coupling
    for k in range(n_sites - 1):
        H[k + 1, k + 2] = H[k + 2, k + 1] = chain.hoppings[k]
    A, err, rec = _propagate_single(H, grid, omega_s, end_site=dim - 1)
    if rec < grid.t_final - grid.t0:
        warnings.warn(
            f"excitation reaches the end of the {n_sites}-site chain; reflection returns near t = {grid.t0 + rec:.4g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return ChainAmplitude(grid.times, A, err, rec)


def star_propagate_one_excitation(omega_s: float, star: StarDiscretization, grid: TimeGrid) -> ChainAmplitude:
    """Same dynamics for the star geometry (system coupled to every node with ``sqrt(W_p)``)."""
    dim = star.order + 1
    H = np.zeros((dim, dim))
    H[0, 0] = omega_s
    H[1:, 1:] = np.diag(star.nodes)
    H[0, 1:] = H[1:, 0] = np.sqrt(star.weights)
    A, err, _ = _propagate_single(H, grid, omega_s, end_site=None)
    return ChainAmplitude(grid.times, A, err, np.inf)
