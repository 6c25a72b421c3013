"""Non-Markovian quantum jumps for the canonical time-local master equation.

The generator convention is ``Delta_k (2 C rho C^dag - {C^dag C, rho})``, so the
effective Hamiltonian is ``H - i sum_k Delta_k C_k^dag C_k``. A member in state
``psi`` jumps forward through a channel with ``Delta_k > 0`` with probability
``2 Delta_k dt <C_k^dag C_k>``. A channel with ``Delta_k < 0`` moves members back
from ``C_k psi_a / ||C_k psi_a||`` to ``psi_a`` with probability
``(N_a / N_target) 2 |Delta_k| dt <psi_a|C_k^dag C_k|psi_a>``.

The ensemble is stored as classes of identical states (equal up to a global
phase within ``merge_tol``) with integer member counts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from ..bath.noise import STREAM_JUMPS, trajectory_rng
from ..core import TimeGrid, trace_norm
from ..errors import ConfigError, InvariantError, PositivityViolation
from ..mastereq import TimeLocalSpec
from .ensemble import EnsembleResult


@dataclass
class JumpEnsemble:
    """Final classes plus the jump record of the run."""

    states: list
    counts: NDArray[np.int64]
    first_jump_times: NDArray[np.float64]
    forward_jumps: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    backward_jumps: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_classes: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _heff_rhs(spec: TimeLocalSpec):
    def heff(t):
        h, chans = spec.at(t)
        out = np.array(h, dtype=complex)
        for c, r in chans:
            if r != 0.0:
                out = out - 1j * r * (c.conj().T @ c)
        return out

    return heff


def _rk4_state(heff, t, psi, h):
    a = heff(t)
    b = heff(t + 0.5 * h)
    c = heff(t + h)
    k1 = -1j * (a @ psi)
    k2 = -1j * (b @ (psi + 0.5 * h * k1))
    k3 = -1j * (b @ (psi + 0.5 * h * k2))
    k4 = -1j * (c @ (psi + h * k3))
    out = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return out / np.linalg.norm(out)


class _Classes:
    def __init__(self, tol: float):
        self.tol = tol
        self.states: dict[int, NDArray] = {}
        self.counts: dict[int, int] = {}
        self._next = 0

    def find(self, psi) -> int | None:
        for cid, s in self.states.items():
            if abs(np.vdot(s, psi)) >= 1.0 - self.tol:
                return cid
        return None

    def add(self, psi, count=0) -> int:
        cid = self.find(psi)
        if cid is None:
            cid = self._next
            self._next += 1
            self.states[cid] = psi
            self.counts[cid] = 0
        self.counts[cid] += count
        return cid

    def live(self):
        return [c for c in sorted(self.states) if self.counts[c] > 0]


def nmqj_evolve(spec: TimeLocalSpec, psi0, grid: TimeGrid, N: int, seed: int, *, merge_tol: float = 1e-10
                ) -> tuple[EnsembleResult, JumpEnsemble]:
    """Propagate an ensemble of ``N`` members with forward and backward jumps.

    Returns the averaged density matrix (``stderr`` from the multinomial spread of
    the classes) and the jump record (first-jump time per member, jumps per step).

    Raises
    ------
    PositivityViolation
        When a negative rate asks to undo jumps into a class that has no members,
        or a backward probability exceeds one.
    """
    if N < 2:
        raise ConfigError("NMQJ needs N >= 2 members")
    psi0 = np.asarray(psi0, dtype=complex).ravel()
    if psi0.size != spec.system.dim:
        raise ConfigError("psi0 does not match the system dimension")
    psi0 = psi0 / np.linalg.norm(psi0)
    heff = _heff_rhs(spec)
    classes = _Classes(merge_tol)
    member = np.full(N, classes.add(psi0, N), dtype=np.int64)
    first = np.full(N, np.nan)
    n_t = grid.n_steps + 1
    d = spec.system.dim
    rho = np.empty((n_t, d, d), dtype=complex)
    stderr = np.zeros(n_t)
    entry_se = np.zeros((n_t, d, d))
    fwd = np.zeros(grid.n_steps, dtype=np.int64)
    bwd = np.zeros(grid.n_steps, dtype=np.int64)
    ncls = np.zeros(n_t, dtype=np.int64)
    h = grid.dt

    def record(k):
        live = classes.live()
        projs = [np.outer(classes.states[c], classes.states[c].conj()) for c in live]
        w = np.array([classes.counts[c] for c in live], dtype=float) / N
        mean = sum(wi * p for wi, p in zip(w, projs))
        var = sum(wi * np.abs(p - mean) ** 2 for wi, p in zip(w, projs))
        rho[k] = 0.5 * (mean + mean.conj().T)
        entry_se[k] = np.sqrt(var / N)
        stderr[k] = trace_norm(entry_se[k])
        ncls[k] = len(live)

    record(0)
    for k in range(grid.n_steps):
        t = grid.t0 + k * h
        _, chans = spec.at(t)
        live = classes.live()
        moves: dict[int, list] = {c: [] for c in live}
        for src in live:
            psi = classes.states[src]
            for c, r in chans:
                if r == 0.0:
                    continue
                cpsi = c @ psi
                weight = float(np.vdot(cpsi, cpsi).real)
                if weight <= 1e-300:
                    continue
                if r > 0:
                    target = classes.add(cpsi / np.sqrt(weight))
                    moves[src].append((2.0 * r * h * weight, target, +1))
                else:
                    target = classes.find(cpsi / np.sqrt(weight))
                    n_src = classes.counts[src]
                    n_tgt = 0 if target is None else classes.counts[target]
                    if n_tgt == 0:
                        raise PositivityViolation(
                            f"negative rate at t = {t:.6g} must undo jumps that no member has made", time=t
                        )
                    moves.setdefault(target, []).append((n_src / n_tgt * 2.0 * abs(r) * h * weight, src, -1))
        u = trajectory_rng(seed, k, STREAM_JUMPS).random(N)
        new_member = member.copy()
        for src, options in moves.items():
            if not options:
                continue
            probs = np.array([p for p, _, _ in options])
            if probs.sum() > 1.0:
                raise PositivityViolation(
                    f"jump probability {probs.sum():.3g} > 1 at t = {t:.6g}; reduce dt", time=t
                )
            cum = np.cumsum(probs)
            idx = np.flatnonzero(member == src)
            pick = np.searchsorted(cum, u[idx], side="right")
            for j, (_, target, kind) in enumerate(options):
                sel = idx[pick == j]
                if sel.size == 0:
                    continue
                new_member[sel] = target
                classes.counts[src] -= sel.size
                classes.counts[target] += sel.size
                fresh = sel[np.isnan(first[sel])]
                first[fresh] = t + 0.5 * h
                if kind > 0:
                    fwd[k] += sel.size
                else:
                    bwd[k] += sel.size
        member = new_member
        # deterministic drift of every occupied class, then merge coincident classes
        for c in classes.live():
            classes.states[c] = _rk4_state(heff, t, classes.states[c], h)
        for c in list(classes.states):
            if classes.counts[c] == 0:
                del classes.states[c], classes.counts[c]
        ids = sorted(classes.states)
        for i, a in enumerate(ids):
            if a not in classes.states:
                continue
            for b in ids[i + 1 :]:
                if b in classes.states and abs(np.vdot(classes.states[a], classes.states[b])) >= 1.0 - merge_tol:
                    classes.counts[a] += classes.counts.pop(b)
                    del classes.states[b]
                    member[member == b] = a
        if sum(classes.counts.values()) != N:
            raise InvariantError(f"NMQJ member count drifted at step {k + 1}", step=k + 1, time=t + h)
        record(k + 1)
    live = classes.live()
    jumps = JumpEnsemble(
        [classes.states[c] for c in live],
        np.array([classes.counts[c] for c in live], dtype=np.int64),
        first,
        fwd,
        bwd,
        ncls,
    )
    tr_se = np.zeros(n_t)
    return EnsembleResult(grid.times, rho, N, stderr, tr_se, 0, entry_se), jumps
