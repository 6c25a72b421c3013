"""Hierarchical equations of motion for exponential-sum bath kernels.

Every coupling ``S_j`` (Hermitian) has a kernel ``alpha_j(t) = sum_m c_jm exp(-mu_jm t)``.
A term with real ``mu`` gives one hierarchy slot with

    Theta rho = c S rho - conj(c) rho S,

a term with complex ``mu`` gives two slots (``mu`` with ``c S rho`` and ``conj(mu)``
with ``-conj(c) rho S``).  With ``n`` the slot occupations,

    d rho_n/dt = -(i H^x + sum_k n_k mu_k) rho_n - i sum_k S_k^x rho_{n + e_k}
                 - i sum_k n_k Theta_k rho_{n - e_k}.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from .bath.correlation import CorrelationSum, matsubara_expansion
from .bath.spectral import BathSpec
from .core import (
    TimeGrid,
    Trajectory,
    check_trajectory,
    commutator_super,
    hamiltonian_super,
    rk4_step,
    spost,
    spre,
)
from .errors import BudgetError, ConfigError, NumericalError
from .mastereq import SystemSpec, _validated_rho

TERMINATORS = ("truncate", "markov")


@dataclass(frozen=True)
class Slot:
    """One hierarchy direction: coupling index, decay rate and ``Theta = cl S . + cr . S``."""

    coupling: int
    mu: complex
    cl: complex
    cr: complex


def expansion_slots(expansions) -> list[Slot]:
    slots = []
    for j, exp in enumerate(expansions):
        if not isinstance(exp, CorrelationSum) or len(exp) == 0:
            raise ConfigError(f"expansion {j} must be a nonempty CorrelationSum")
        for c, mu in zip(exp.coeffs, exp.rates):
            if abs(mu.imag) <= 1e-14 * abs(mu):
                slots.append(Slot(j, complex(mu.real), complex(c), -np.conj(c)))
            else:
                slots.append(Slot(j, complex(mu), complex(c), 0.0))
                slots.append(Slot(j, complex(np.conj(mu)), 0.0, -np.conj(c)))
    return slots


def ado_count(n_slots: int, depth: int) -> int:
    return comb(depth + n_slots, n_slots)


def enumerate_indices(n_slots: int, depth: int) -> NDArray[np.int64]:
    """All occupation vectors with ``sum(n) <= depth``, ordered by level then lexicographically."""
    out = [np.zeros(n_slots, dtype=np.int64)]
    level = [tuple([0] * n_slots)]
    for _ in range(depth):
        nxt = set()
        for idx in level:
            for k in range(n_slots):
                n = list(idx)
                n[k] += 1
                nxt.add(tuple(n))
        level = sorted(nxt, reverse=True)
        out.extend(np.array(level, dtype=np.int64))
    return np.array(out, dtype=np.int64).reshape(-1, n_slots)


@dataclass
class HierarchyState:
    """Flat ADO storage with neighbour tables.

    ``ados[0]`` is the physical density matrix. ``plus[i, k]`` (``minus[i, k]``) is
    the row of ``indices[i] + e_k`` (``- e_k``), or ``-1`` outside the hierarchy.
    """

    system: SystemSpec
    slots: list
    depth: int
    indices: NDArray[np.int64]
    plus: NDArray[np.int64]
    minus: NDArray[np.int64]
    ados: NDArray[np.complex128]
    terminator: str = "truncate"

    @property
    def n_ados(self) -> int:
        return self.indices.shape[0]

    @property
    def rho(self) -> NDArray[np.complex128]:
        return self.ados[0]


def build_hierarchy(system: SystemSpec, expansions, depth: int, rho0=None, *, max_ados: int = 200_000,
                    terminator: str = "truncate") -> HierarchyState:
    """Enumerate the hierarchy and zero-initialize all ADOs except ``rho_0 = rho0``.

    Raises
    ------
    ConfigError
        For ``depth < 1``, empty expansions or a coupling/expansion count mismatch.
    BudgetError
        If the number of ADOs ``C(depth + K, K)`` exceeds ``max_ados``.
    """
    if depth < 1:
        raise ConfigError("HEOM depth must be >= 1")
    if terminator not in TERMINATORS:
        raise ConfigError(f"terminator must be one of {TERMINATORS}")
    expansions = list(expansions)
    if len(expansions) != len(system.couplings):
        raise ConfigError(f"{len(expansions)} expansions for {len(system.couplings)} couplings")
    for j, s in enumerate(system.couplings):
        if np.max(np.abs(s - s.conj().T)) > 1e-12:
            raise ConfigError(f"HEOM coupling {j} must be Hermitian")
    slots = expansion_slots(expansions)
    if any(s.mu.real <= 0 for s in slots):
        raise ConfigError("every exponential term needs Re mu > 0")
    count = ado_count(len(slots), depth)
    if count > max_ados:
        raise BudgetError(f"hierarchy needs {count} ADOs (budget {max_ados})", requested=count, budget=max_ados)
    idx = enumerate_indices(len(slots), depth)
    lookup = {tuple(r): i for i, r in enumerate(idx)}
    K = len(slots)
    plus = np.full((count, K), -1, dtype=np.int64)
    minus = np.full((count, K), -1, dtype=np.int64)
    for i, r in enumerate(idx):
        for k in range(K):
            n = list(r)
            n[k] += 1
            plus[i, k] = lookup.get(tuple(n), -1)
            if r[k] > 0:
                n[k] -= 2
                minus[i, k] = lookup[tuple(n)]
    d = system.dim
    ados = np.zeros((count, d, d), dtype=complex)
    if rho0 is not None:
        ados[0] = _validated_rho(rho0, d)
    return HierarchyState(system, slots, depth, idx, plus, minus, ados, terminator)


def _theta_super(slot: Slot, S):
    return slot.cl * spre(S) + slot.cr * spost(S)


def hierarchy_generator(state: HierarchyState) -> sparse.csr_matrix:
    """Sparse generator acting on the stacked column-vectorized ADOs.

    Assembled from the neighbour tables as
    ``I (x) L_H - diag(decay) (x) I + sum_k P_k (x) (-i S_k^x) + N_k (x) (-i Theta_k)``.
    """
    n_ados = state.n_ados
    d2 = state.system.dim**2
    mu = np.array([s.mu for s in state.slots])
    decay = state.indices @ mu
    eye_a = sparse.identity(n_ados, format="csr")
    gen = sparse.kron(eye_a, sparse.csr_matrix(hamiltonian_super(state.system.H)))
    gen = gen - sparse.kron(sparse.diags(decay), sparse.identity(d2))
    for k, slot in enumerate(state.slots):
        S = state.system.couplings[slot.coupling]
        sx = -1j * commutator_super(S)
        theta = -1j * _theta_super(slot, S)
        rows = np.flatnonzero(state.plus[:, k] >= 0)
        up = sparse.csr_matrix((np.ones(rows.size), (rows, state.plus[rows, k])), shape=(n_ados, n_ados))
        rows = np.flatnonzero(state.minus[:, k] >= 0)
        down = sparse.csr_matrix(
            (state.indices[rows, k].astype(float), (rows, state.minus[rows, k])), shape=(n_ados, n_ados)
        )
        gen = gen + sparse.kron(up, sparse.csr_matrix(sx)) + sparse.kron(down, sparse.csr_matrix(theta))
        if state.terminator == "markov":
            # rho_{n + e_k} ~ -i (n_k + 1) Theta_k rho_n / (decay_n + mu_k) on the boundary level
            rows = np.flatnonzero(state.plus[:, k] < 0)
            fac = (state.indices[rows, k] + 1.0) / (decay[rows] + mu[k])
            edge = sparse.csr_matrix((fac, (rows, rows)), shape=(n_ados, n_ados))
            gen = gen + sparse.kron(edge, sparse.csr_matrix(sx @ theta))
    return sparse.csr_matrix(gen)


def _flatten(ados):
    return np.ascontiguousarray(ados.transpose(0, 2, 1)).reshape(-1)


def _unflatten(y, n_ados, d):
    return y.reshape(n_ados, d, d).transpose(0, 2, 1)


def heom_rhs(state: HierarchyState, t: float = 0.0) -> NDArray[np.complex128]:
    """Time derivative of every ADO (same layout as ``state.ados``)."""
    gen = hierarchy_generator(state)
    return _unflatten(gen @ _flatten(state.ados), state.n_ados, state.system.dim)


def _stiffness(gen) -> float:
    """Upper bound on the generator spectral radius (max absolute row sum)."""
    return float(np.max(np.asarray(abs(gen).sum(axis=1)).ravel()))


def _expansions_for(system: SystemSpec, bath_or_expansions, m_max):
    if isinstance(bath_or_expansions, BathSpec):
        exp = matsubara_expansion(bath_or_expansions, m_max)
        return [exp] * len(system.couplings)
    if isinstance(bath_or_expansions, CorrelationSum):
        return [bath_or_expansions] * len(system.couplings)
    return list(bath_or_expansions)


def heom_evolve(system: SystemSpec, bath_or_expansions, rho0, depth: int, grid: TimeGrid, *,
                m_max: int | None = None, terminator: str = "truncate", substeps: int | None = None,
                max_ados: int = 200_000, check: bool = True) -> Trajectory:
    """Propagate the hierarchy with RK4 and return the physical density matrix.

    Parameters
    ----------
    bath_or_expansions : BathSpec, CorrelationSum or sequence of CorrelationSum
        A Drude ``BathSpec`` is expanded with :func:`matsubara_expansion`
        (``m_max=None`` runs its convergence loop); one expansion per coupling otherwise.
    terminator : {"truncate", "markov"}
        ``"truncate"`` sets ADOs beyond ``depth`` to zero; ``"markov"`` replaces
        them by their adiabatic estimate from the boundary level.
    substeps : int, optional
        RK4 steps per grid step; by default chosen so that ``h * max|rate| <= 2``
        (the hierarchy is stiff through its decay rates ``sum_k n_k mu_k``).
    """
    expansions = _expansions_for(system, bath_or_expansions, m_max)
    state = build_hierarchy(system, expansions, depth, rho0, max_ados=max_ados, terminator=terminator)
    gen = hierarchy_generator(state)
    if substeps is None:
        substeps = max(1, int(np.ceil(grid.dt * _stiffness(gen) / 2.0)))
    d = system.dim

    def rhs(t, v):
        return gen @ v

    y = _flatten(state.ados)
    rhos = np.empty((grid.n_steps + 1, d, d), dtype=complex)
    rhos[0] = state.ados[0]
    h = grid.dt / substeps
    for k in range(grid.n_steps):
        t = grid.t0 + k * grid.dt
        for j in range(substeps):
            y = rk4_step(rhs, t + j * h, y, h)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite ADOs at step {k + 1}", step=k + 1, time=t + grid.dt)
        rhos[k + 1] = y[: d * d].reshape(d, d).T
    if check:
        check_trajectory(rhos, tol_tr=1e-8, tol_herm=1e-9, t=grid.times)
    return Trajectory(grid.times, rhos)
