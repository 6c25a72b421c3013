"""Ensemble averaging of stochastic trajectories.

Trajectories are grouped into fixed blocks of consecutive indices. Each block
produces projector sums, which are merged in block order. The floating-point
summation order therefore does not depend on how blocks are spread over workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from ..core import trace_norm
from ..errors import ConfigError, NumericalError

BLOCK_SIZE = 128
NORM_LIMIT = 1e6
INVALID_FRACTION = 0.01
WORKERS_ENV = "NMDYN_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc


@dataclass(frozen=True)
class BlockSums:
    """Sums over the valid trajectories of one block."""

    count: int
    invalid: int
    s1: NDArray[np.complex128]  # sum of samples, shape (n_t, d, d)
    s2: NDArray[np.float64]  # sum of |sample|^2 entrywise
    tr2: NDArray[np.float64]  # sum of |trace|^2


def block_sums(samples: NDArray, valid: NDArray[np.bool_]) -> BlockSums:
    """Reduce a ``(n, n_t, d, d)`` stack of operator samples."""
    n = samples.shape[0]
    s1 = np.zeros(samples.shape[1:], dtype=complex)
    s2 = np.zeros(samples.shape[1:])
    tr2 = np.zeros(samples.shape[1])
    for i in range(n):  # fixed order inside the block
        if valid[i]:
            x = samples[i]
            s1 += x
            s2 += np.abs(x) ** 2
            tr2 += np.abs(np.trace(x, axis1=1, axis2=2)) ** 2
    return BlockSums(int(valid.sum()), int(n - valid.sum()), s1, s2, tr2)


@dataclass(frozen=True)
class EnsembleResult:
    """Ensemble mean of projector-like samples.

    ``stderr[t]`` is the trace norm of the entrywise standard error of the mean;
    ``trace_stderr[t]`` is the standard error of the mean trace and
    ``entry_stderr[t, i, j]`` the standard error of each matrix element.
    """

    times: NDArray[np.float64]
    rho: NDArray[np.complex128]
    n_traj: int
    stderr: NDArray[np.float64]
    trace_stderr: NDArray[np.float64]
    n_invalid: int = 0
    entry_stderr: NDArray[np.float64] | None = None

    def expect(self, op) -> NDArray[np.complex128]:
        return np.einsum("ij,tji->t", np.asarray(op, dtype=complex), self.rho)

    def expect_stderr(self, op) -> NDArray[np.float64]:
        """Upper bound ``sum_ij |O_ji| se_ij`` on the standard error of ``Tr(O rho)``."""
        if self.entry_stderr is None:
            return np.zeros(len(self.times))
        return np.einsum("ij,tji->t", np.abs(np.asarray(op, dtype=complex)), self.entry_stderr)


def merge_blocks(times, blocks: list[BlockSums], n_requested: int) -> EnsembleResult:
    count = sum(b.count for b in blocks)
    invalid = sum(b.invalid for b in blocks)
    if invalid > INVALID_FRACTION * n_requested:
        raise NumericalError(
            f"{invalid} of {n_requested} trajectories were flagged invalid (limit {INVALID_FRACTION:.0%}); ensemble rejected"
        )
    if count < 2:
        raise NumericalError("fewer than two valid trajectories")
    s1 = np.zeros_like(blocks[0].s1)
    s2 = np.zeros_like(blocks[0].s2)
    tr2 = np.zeros_like(blocks[0].tr2)
    for b in blocks:
        s1 += b.s1
        s2 += b.s2
        tr2 += b.tr2
    mean = s1 / count
    var = np.clip(s2 / count - np.abs(mean) ** 2, 0.0, None) * count / (count - 1)
    se = np.sqrt(var / count)
    tr_mean = np.trace(mean, axis1=1, axis2=2)
    tr_var = np.clip(tr2 / count - np.abs(tr_mean) ** 2, 0.0, None) * count / (count - 1)
    rho = 0.5 * (mean + np.conj(np.swapaxes(mean, 1, 2)))
    stderr = np.array([trace_norm(m) for m in se])
    return EnsembleResult(np.asarray(times), rho, count, stderr, np.sqrt(tr_var / count), invalid, se)


def _run_block(task):
    fn, start, stop = task
    samples, valid = fn(np.arange(start, stop))
    return block_sums(samples, valid)


def ensemble_average(trajectories, times, n_traj: int, *, workers: int | None = None,
                     block_size: int = BLOCK_SIZE) -> EnsembleResult:
    """Average operator samples produced by ``trajectories(indices) -> (samples, valid)``.

    ``samples`` has shape ``(len(indices), n_t, d, d)``; ``valid`` flags trajectories
    to keep. ``trajectories`` must be picklable when ``workers > 1``.

    Raises
    ------
    NumericalError
        If more than 1% of the trajectories are invalid.
    """
    if n_traj < 2:
        raise ConfigError("n_traj must be >= 2")
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    tasks = [(trajectories, s, min(s + block_size, n_traj)) for s in range(0, n_traj, block_size)]
    if workers == 1 or len(tasks) == 1:
        blocks = [_run_block(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_run_block, tasks))
    return merge_blocks(times, blocks, n_traj)


def projectors(psi: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """``|psi><psi|`` for a ``(n, n_t, d)`` stack of state vectors."""
    return psi[..., :, None] * np.conj(psi[..., None, :])


def flag_invalid(samples: NDArray) -> NDArray[np.bool_]:
    """Valid when finite and below the magnitude limit at every time."""
    mag = np.abs(samples).reshape(samples.shape[0], -1)
    return np.all(np.isfinite(mag), axis=1) & (np.max(np.where(np.isfinite(mag), mag, np.inf), axis=1) < NORM_LIMIT)
