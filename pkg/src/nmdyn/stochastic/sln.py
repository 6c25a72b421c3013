"""Stochastic Liouville-von Neumann equation.

    dP/dt = -i[H, P] + i xi(t) [q, P] + (i/2) nu(t) {q, P}

with the noise pair of :func:`nmdyn.bath.noise.sample_sln_noise_pair`
(``M[xi xi] = alpha_R``, ``M[xi(t) nu(s)] = 2 i alpha_I(t - s) theta(t - s)``,
``M[nu nu] = 0``). Samples are not trace preserving; their mean is the reduced
density matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from ..bath.correlation import kernel_values
from ..bath.noise import SLNFactor, draw_sln, sln_factor
from ..core import TimeGrid, rk4_step
from ..errors import ConfigError
from ..mastereq import SystemSpec, _validated_rho
from .ensemble import EnsembleResult, ensemble_average, flag_invalid


def left(A: NDArray, P: NDArray) -> NDArray:
    """``A @ P`` for a stack ``P[..., d, d]`` using elementwise multiply-adds."""
    out = A[:, 0, None] * P[..., 0:1, :]
    for j in range(1, A.shape[1]):
        out = out + A[:, j, None] * P[..., j : j + 1, :]
    return out


def right(P: NDArray, A: NDArray) -> NDArray:
    """``P @ A`` for a stack ``P[..., d, d]`` using elementwise multiply-adds."""
    out = P[..., :, 0:1] * A[0]
    for j in range(1, A.shape[0]):
        out = out + P[..., :, j : j + 1] * A[j]
    return out


def split_kernel(alpha):
    """Real and imaginary parts of a Hermitian kernel as real callables."""

    def alpha_r(t):
        return np.real(kernel_values(alpha, np.asarray(t, dtype=float)))

    def alpha_i(t):
        return np.imag(kernel_values(alpha, np.asarray(t, dtype=float)))

    return alpha_r, alpha_i


@dataclass(frozen=True)
class SlnProblem:
    H: NDArray[np.complex128]
    q: NDArray[np.complex128]
    rho0: NDArray[np.complex128]
    grid: TimeGrid
    factor: SLNFactor
    seed: int

    def propagate(self, indices) -> NDArray[np.complex128]:
        """Operator samples ``P(t)``, shape ``(n, n_t, d, d)``."""
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        noises = [draw_sln(self.factor, self.seed, int(i)) for i in indices]
        xi = np.array([z.xi for z in noises])
        nu = np.array([z.nu for z in noises])
        H, q, grid = self.H, self.q, self.grid
        n, d = indices.size, H.shape[0]

        def rhs(t, P, k):
            j = int(round(2.0 * (t - grid.t0) / grid.dt))
            qp, pq = left(q, P), right(P, q)
            out = -1j * (left(H, P) - right(P, H))
            out += 1j * xi[:, j, None, None] * (qp - pq)
            out += 0.5j * nu[:, k, None, None] * (qp + pq)
            return out

        P = np.broadcast_to(self.rho0, (n, d, d)).astype(complex)
        out = np.empty((n, grid.n_steps + 1, d, d), dtype=complex)
        out[:, 0] = P
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(grid.n_steps):
                P = rk4_step(lambda t, y, k=k: rhs(t, y, k), grid.t0 + k * grid.dt, P, grid.dt)
                out[:, k + 1] = P
        return out

    def __call__(self, indices):
        samples = self.propagate(indices)
        return samples, flag_invalid(samples)


def _problem(system: SystemSpec, q, alpha_r, alpha_i, rho0, grid, seed, nu_scale=None) -> SlnProblem:
    q = system.coupling(0) if q is None else np.asarray(q, dtype=complex)
    if q.shape != system.H.shape or np.max(np.abs(q - q.conj().T)) > 1e-12:
        raise ConfigError("SLN coupling q must be Hermitian and match the system dimension")
    rho0 = _validated_rho(rho0, system.dim)
    fac = sln_factor(alpha_r, alpha_i, grid, nu_scale)
    return SlnProblem(system.H, q, rho0, grid, fac, int(seed))


def sln_trajectory(system: SystemSpec, q, alpha_r, alpha_i, rho0, grid: TimeGrid, seed: int, idx: int
                   ) -> NDArray[np.complex128]:
    """One SLN sample ``P(t)``, shape ``(n_t, d, d)``."""
    return _problem(system, q, alpha_r, alpha_i, rho0, grid, seed).propagate([idx])[0]


def sln_ensemble(system: SystemSpec, q, alpha, rho0, grid: TimeGrid, n_traj: int, seed: int, *,
                 workers: int | None = None, nu_scale: float | None = None) -> EnsembleResult:
    """Ensemble mean of SLN samples for a Hermitian kernel ``alpha`` (or an ``(alpha_R, alpha_I)`` pair)."""
    alpha_r, alpha_i = alpha if isinstance(alpha, tuple) else split_kernel(alpha)
    prob = _problem(system, q, alpha_r, alpha_i, rho0, grid, seed, nu_scale)
    return ensemble_average(prob, grid.times, n_traj, workers=workers)
