"""Hierarchy of pure states for a single exponential kernel ``alpha(t) = g exp(-Omega t)``.

Level ``k`` obeys

    d psi_k/dt = (-i H - k Omega + L z*_t) psi_k + k g L psi_{k-1} - L^dag psi_{k+1},

closed by ``psi_{K+1} = (g / Omega) L psi_K``. The nonlinear variant shifts the
noise by ``m_t = int_0^t conj(alpha(t - s)) <L^dag>_s ds`` (one auxiliary scalar
obeying ``m' = conj(g) <L^dag> - conj(Omega) m``) and replaces ``L^dag`` in the
coupling to level ``k + 1`` by ``L^dag - <L^dag>``.

Trajectories are propagated in batches. Matrix-vector products are written as
explicit elementwise sums, so each trajectory's result does not depend on the
batch it was computed in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from ..bath.correlation import CorrelationSum
from ..bath.noise import sample_colored_noise_batch
from ..core import TimeGrid, rk4_step
from ..errors import ConfigError
from ..mastereq import SystemSpec
from .ensemble import EnsembleResult, ensemble_average, flag_invalid, projectors


def apply(M: NDArray, psi: NDArray) -> NDArray:
    """``M @ psi`` over the last axis, as elementwise multiply-adds (no BLAS)."""
    out = psi[..., 0:1] * M[:, 0]
    for j in range(1, M.shape[1]):
        out = out + psi[..., j : j + 1] * M[:, j]
    return out


def expect(M: NDArray, psi: NDArray) -> NDArray:
    """``<psi|M|psi> / <psi|psi>`` over the last axis."""
    num = np.sum(np.conj(psi) * apply(M, psi), axis=-1)
    den = np.sum(np.abs(psi) ** 2, axis=-1)
    return num / den


def _single_exponential(expansion) -> tuple[complex, complex]:
    if not isinstance(expansion, CorrelationSum) or len(expansion) != 1:
        raise ConfigError("HOPS needs a single-exponential CorrelationSum")
    g, omega = complex(expansion.coeffs[0]), complex(expansion.rates[0])
    if omega.real <= 0:
        raise ConfigError("HOPS needs Re Omega > 0")
    return g, omega


@dataclass(frozen=True)
class HopsProblem:
    """Everything a batch of HOPS trajectories needs (picklable)."""

    H: NDArray[np.complex128]
    L: NDArray[np.complex128]
    g: complex
    omega: complex
    psi0: NDArray[np.complex128]
    grid: TimeGrid
    k_max: int
    seed: int
    nonlinear: bool = False
    terminator: bool = True

    def propagate(self, indices) -> NDArray[np.complex128]:
        """``psi_0(t)`` for every trajectory index, shape ``(n, n_t, d)``.

        Linear runs return the unnormalized state, nonlinear runs the normalized one.
        """
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        n, d, K = indices.size, self.H.shape[0], self.k_max
        grid = self.grid
        alpha = CorrelationSum.single(self.g, self.omega)
        zc = np.conj(sample_colored_noise_batch(alpha, grid.refine(2), self.seed, indices))
        H, L = self.H, self.L
        Ld = L.conj().T
        ks = np.arange(K + 1)
        decay = -1j * H[None] - (ks * self.omega)[:, None, None] * np.eye(d)[None]  # per level
        term = self.g / self.omega if self.terminator else 0.0
        gk = (ks[1:] * self.g)[None, :, None]
        nonlinear = self.nonlinear
        size = (K + 1) * d

        def rhs(t, y):
            j = int(round(2.0 * (t - grid.t0) / grid.dt))
            psi = y[:, :size].reshape(n, K + 1, d)
            out = np.zeros_like(psi)
            for k in range(K + 1):
                out[:, k] = apply(decay[k], psi[:, k])
            lpsi = apply(L, psi)
            noise = zc[:, j]
            if nonlinear:
                ld = expect(Ld, psi[:, 0])
                noise = noise + y[:, size]
            out += noise[:, None, None] * lpsi
            out[:, 1:] += gk * lpsi[:, :-1]
            upper = np.concatenate([psi[:, 1:], term * lpsi[:, -1:]], axis=1)
            up = apply(Ld, upper)
            if nonlinear:
                up = up - ld[:, None, None] * upper
            out -= up
            res = np.empty_like(y)
            res[:, :size] = out.reshape(n, size)
            if nonlinear:
                res[:, size] = np.conj(self.g) * ld - np.conj(self.omega) * y[:, size]
            return res

        y = np.zeros((n, size + 1), dtype=complex)
        y[:, :d] = self.psi0
        out = np.empty((n, grid.n_steps + 1, d), dtype=complex)
        out[:, 0] = self.psi0
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(grid.n_steps):
                y = rk4_step(rhs, grid.t0 + k * grid.dt, y, grid.dt)
                if nonlinear:
                    nrm = np.sqrt(np.sum(np.abs(y[:, :d]) ** 2, axis=1))
                    y[:, :size] /= nrm[:, None]
                out[:, k + 1] = y[:, :d]
        return out

    def __call__(self, indices):
        psi = self.propagate(indices)
        samples = projectors(psi)
        return samples, flag_invalid(samples)


def _problem(system: SystemSpec, L, expansion, psi0, grid, k_max, seed, nonlinear, terminator) -> HopsProblem:
    if k_max < 1:
        raise ConfigError("k_max must be >= 1")
    g, omega = _single_exponential(expansion)
    L = system.coupling(0) if L is None else np.asarray(L, dtype=complex)
    psi0 = np.asarray(psi0, dtype=complex).ravel()
    if psi0.size != system.dim or L.shape != system.H.shape:
        raise ConfigError("psi0 and L must match the system dimension")
    psi0 = psi0 / np.linalg.norm(psi0)
    return HopsProblem(system.H, L, g, omega, psi0, grid, int(k_max), int(seed), nonlinear, terminator)


def hops_linear_trajectory(system: SystemSpec, L, expansion, psi0, grid: TimeGrid, k_max: int, seed: int,
                           idx: int, *, terminator: bool = True) -> NDArray[np.complex128]:
    """One linear HOPS trajectory ``psi_0(t)`` (unnormalized), shape ``(n_t, d)``."""
    return _problem(system, L, expansion, psi0, grid, k_max, seed, False, terminator).propagate([idx])[0]


def hops_nonlinear_trajectory(system: SystemSpec, L, expansion, psi0, grid: TimeGrid, k_max: int, seed: int,
                              idx: int, *, terminator: bool = True) -> NDArray[np.complex128]:
    """One nonlinear HOPS trajectory (normalized after every step), shape ``(n_t, d)``."""
    return _problem(system, L, expansion, psi0, grid, k_max, seed, True, terminator).propagate([idx])[0]


def hops_ensemble(system: SystemSpec, L, expansion, psi0, grid: TimeGrid, k_max: int, n_traj: int, seed: int, *,
                  nonlinear: bool = False, terminator: bool = True, workers: int | None = None) -> EnsembleResult:
    """Ensemble-averaged density matrix from linear or nonlinear HOPS."""
    prob = _problem(system, L, expansion, psi0, grid, k_max, seed, nonlinear, terminator)
    return ensemble_average(prob, grid.times, n_traj, workers=workers)
