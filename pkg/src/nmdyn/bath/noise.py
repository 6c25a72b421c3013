"""Gaussian noise synthesis for the stochastic solvers.

Complex noise with ``M[z_t z_s^*] = alpha(t - s)`` and ``M[z_t z_s] = 0`` is built
by circulant embedding of the covariance on a grid padded by the kernel decay
length, with an eigendecomposition fallback for short grids or when the
embedding is not positive semidefinite.

Every realization draws from a Philox stream keyed by ``(seed, trajectory_index)``,
so a given trajectory gets the same numbers however the ensemble is split
across workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import fft as sfft

from ..core import TimeGrid
from ..errors import KernelError
from .correlation import kernel_values

STREAM_NOISE = 0
STREAM_SLN = 1
STREAM_JUMPS = 2

_MASK64 = (1 << 64) - 1
_SHORT_GRID = 64


def trajectory_rng(seed: int, index: int, stream: int = STREAM_NOISE) -> np.random.Generator:
    """Counter-based generator for one trajectory."""
    key = np.array([int(seed) & _MASK64, int(index) & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, 0, int(stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _decay_length(alpha, dt: float, n_points: int) -> int:
    """Number of lags after which ``|alpha| < 1e-12 |alpha(0)|`` (capped)."""
    cap = 8 * n_points
    lags = dt * np.arange(cap + 1)
    vals = np.abs(kernel_values(alpha, lags))
    scale = max(vals[0], np.max(vals))
    if scale == 0:
        return 0
    above = np.flatnonzero(vals > 1e-12 * scale)
    return int(above[-1]) + 1 if above.size else 0


@dataclass(frozen=True)
class NoiseFactor:
    """Precomputed square-root factor of the noise covariance on a grid.

    ``method`` is ``"circulant"`` (``sqrt_eig`` holds sqrt of the circulant
    spectrum, FFT length ``n_fft``) or ``"eig"`` (``sqrt_cov`` is a matrix
    square root of the covariance).
    """

    n_points: int
    method: str
    n_fft: int = 0
    sqrt_eig: NDArray | None = None
    sqrt_cov: NDArray | None = None

    def draw(self, rng: np.random.Generator) -> NDArray[np.complex128]:
        """One complex realization with ``M[z z^H] = C`` and ``M[z z^T] = 0``."""
        if self.method == "circulant":
            w = (rng.standard_normal(self.n_fft) + 1j * rng.standard_normal(self.n_fft)) / np.sqrt(2.0)
            z = sfft.fft(self.sqrt_eig * w) / np.sqrt(self.n_fft)
            return z[: self.n_points]
        w = (rng.standard_normal(self.n_points) + 1j * rng.standard_normal(self.n_points)) / np.sqrt(2.0)
        return self.sqrt_cov @ w


def _eig_factor(c: NDArray, n_points: int) -> NoiseFactor:
    idx = np.arange(n_points)
    lag = idx[:, None] - idx[None, :]
    cov = np.where(lag >= 0, c[np.abs(lag)], np.conj(c[np.abs(lag)]))
    lam, vec = np.linalg.eigh(cov)
    if lam[0] < -1e-8 * max(lam[-1], 1e-300):
        raise KernelError(
            f"noise covariance is not positive semidefinite (min eigenvalue {lam[0]:.3e}); the kernel is unphysical"
        )
    root = vec * np.sqrt(np.clip(lam, 0.0, None))
    return NoiseFactor(n_points, "eig", sqrt_cov=root)


def noise_factor(alpha, grid: TimeGrid) -> NoiseFactor:
    """Covariance factor for ``M[z_j z_k^*] = alpha(t_j - t_k)`` on ``grid``."""
    m = grid.n_steps + 1
    dt = grid.dt
    if m <= _SHORT_GRID:
        c = kernel_values(alpha, dt * np.arange(m))
        return _eig_factor(c, m)
    pad = _decay_length(alpha, dt, m)
    for attempt in range(4):
        p = m + pad * (2**attempt)
        n_fft = sfft.next_fast_len(2 * (p - 1))
        n_fft += n_fft % 2
        half = n_fft // 2
        c = kernel_values(alpha, dt * np.arange(half + 1))
        row = np.empty(n_fft, dtype=complex)
        row[: half + 1] = c
        row[half] = c[half].real
        row[half + 1 :] = np.conj(c[1:half][::-1])
        # First row of a Hermitian circulant; its spectrum must be nonnegative.
        lam = sfft.ifft(row).real * n_fft
        top = np.max(lam)
        if lam.min() >= -1e-10 * top:
            return NoiseFactor(m, "circulant", n_fft=n_fft, sqrt_eig=np.sqrt(np.clip(lam, 0.0, None)))
        if pad == 0:
            pad = m
    if m <= 4096:
        c = kernel_values(alpha, dt * np.arange(m))
        return _eig_factor(c, m)
    raise KernelError("circulant embedding is not positive semidefinite and the grid is too long for eigendecomposition")


_factor_cache: dict = {}


def _cached_factor(alpha, grid: TimeGrid) -> NoiseFactor:
    key = (id(alpha), grid)
    hit = _factor_cache.get(key)
    if hit is not None and hit[0] is alpha:
        return hit[1]
    fac = noise_factor(alpha, grid)
    if len(_factor_cache) > 32:
        _factor_cache.clear()
    _factor_cache[key] = (alpha, fac)
    return fac


def sample_colored_noise(alpha, grid: TimeGrid, seed: int, trajectory_index: int) -> NDArray[np.complex128]:
    """One realization ``z_t`` with ``M[z_t z_s^*] = alpha(t - s)``, ``M[z_t z_s] = 0``.

    Raises
    ------
    KernelError
        If the covariance of ``alpha`` on the grid is not positive semidefinite.
    """
    fac = _cached_factor(alpha, grid)
    return fac.draw(trajectory_rng(seed, trajectory_index, STREAM_NOISE))


def sample_colored_noise_batch(alpha, grid: TimeGrid, seed: int, indices) -> NDArray[np.complex128]:
    """Stack of realizations for ``indices``; row ``k`` equals the single-index call."""
    fac = _cached_factor(alpha, grid)
    return np.array([fac.draw(trajectory_rng(seed, int(i), STREAM_NOISE)) for i in indices])


# --- SLN noise pair ------------------------------------------------------------------


@dataclass(frozen=True)
class SLNNoise:
    """Noise pair on the half-step grid ``tau_j = t0 + j dt / 2``.

    ``xi`` has ``2 n + 1`` samples; ``nu`` holds one value per step (piecewise
    constant on ``[t_k, t_k + dt)``).
    """

    xi: NDArray[np.complex128]
    nu: NDArray[np.complex128]
    dt: float

    def xi_at(self, t_rel: float) -> complex:
        j = int(round(2.0 * t_rel / self.dt))
        return complex(self.xi[j])


@dataclass(frozen=True)
class SLNFactor:
    real_factor: NoiseFactor
    cross: NDArray[np.float64]  # (2n+1, n) step-averaged causal cross kernel times dt
    scale: float
    n_steps: int
    dt: float


def _sln_factor(alpha_r, alpha_i, grid: TimeGrid, nu_scale: float | None) -> SLNFactor:
    n, h = grid.n_steps, grid.dt
    fine = grid.refine(2)
    real_fac = noise_factor(lambda t: np.asarray(alpha_r(t), dtype=float) + 0j, fine)
    tau = 0.5 * h * np.arange(2 * n + 1)
    tk = h * np.arange(n)
    lag = tau[:, None] - tk[None, :]
    ell = np.clip(lag, 0.0, h)
    mid = np.where(ell > 0, lag - 0.5 * ell, 0.0)
    q = 2.0 * np.asarray(alpha_i(mid.ravel()), dtype=float).reshape(mid.shape)
    cross = np.where(ell > 0, ell * q, 0.0)
    if nu_scale is None:
        lags = h * np.arange(n + 1)
        qq = (2.0 * np.asarray(alpha_i(lags), dtype=float)) ** 2
        integral = float(np.trapezoid(qq, lags)) if hasattr(np, "trapezoid") else float(np.trapz(qq, lags))
        nu_scale = (2.0 * integral) ** 0.25 if integral > 0 else 1.0
    return SLNFactor(real_fac, cross, float(nu_scale), n, h)


def sln_factor(alpha_r, alpha_i, grid: TimeGrid, nu_scale: float | None = None) -> SLNFactor:
    """Precompute the SLN noise construction for a grid (reusable across samples)."""
    return _sln_factor(alpha_r, alpha_i, grid, nu_scale)


def draw_sln(fac: SLNFactor, seed: int, trajectory_index: int) -> SLNNoise:
    """Draw one SLN pair from a precomputed factor."""
    rng = trajectory_rng(seed, trajectory_index, STREAM_SLN)
    x = np.sqrt(2.0) * fac.real_factor.draw(rng).real
    n, h, s = fac.n_steps, fac.dt, fac.scale
    a, b, c = (rng.standard_normal(n) / np.sqrt(h) for _ in range(3))
    xi = x + (fac.cross @ (b + 1j * c)) / s
    nu = s * (a + 1j * b)
    return SLNNoise(xi, nu, h)


def sample_sln_noise_pair(alpha_r, alpha_i, grid: TimeGrid, seed: int, trajectory_index: int,
                          nu_scale: float | None = None) -> SLNNoise:
    """Noise pair for the stochastic Liouville equation.

    Statistics (``theta`` the Heaviside step):

    - ``M[xi(t) xi(s)] = alpha_R(t - s)``,
    - ``M[xi(t) nu(s)] = 2 i alpha_I(t - s) theta(t - s)``,
    - ``M[nu(t) nu(s)] = 0``.

    ``xi`` is ``x + (1/s) W (b + i c)`` and ``nu = s (a + i b)`` with independent
    white noises ``a, b, c``; ``x`` is real Gaussian with covariance ``alpha_R``,
    ``W`` the causal cross kernel, and ``s`` a free scale that balances the
    variance of the two terms without changing any of the statistics above.
    The cross correlation is resolved at step resolution (kernel averaged over
    each step).
    """
    fac = _sln_factor(alpha_r, alpha_i, grid, nu_scale)
    return draw_sln(fac, seed, trajectory_index)
