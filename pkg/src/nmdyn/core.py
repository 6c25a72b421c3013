"""Dense linear algebra on small Hilbert spaces and the shared integrators.

Operators are plain complex ``ndarray`` objects of shape ``(d, d)``.
Superoperators act on column-stacked vectors,

    vec(A) = A.reshape(-1, order="F"),   vec(A X B) = kron(B.T, A) @ vec(X),

and every module in the package relies on this convention.

Two-level systems use the basis ``|0> = |e>`` (excited), ``|1> = |g>``, so that
``SIGMA_Z = diag(1, -1)`` and ``SIGMA_MINUS = |g><e|``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvariantError, NumericalError

ComplexArray = NDArray[np.complex128]

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.T.copy()

TOL_HERM = 1e-10
TOL_TRACE = 1e-10
TOL_POS = 1e-8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + dt, ..., t0 + n_steps * dt``."""

    t0: float = 0.0
    dt: float = 0.01
    n_steps: int = 100

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_span(cls, t_max: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        """Grid covering ``[t0, t_max]``; ``t_max - t0`` is rounded to a multiple of dt."""
        n = int(round((t_max - t0) / dt))
        return cls(t0=t0, dt=dt, n_steps=max(n, 1))

    @property
    def times(self) -> NDArray[np.float64]:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_final(self) -> float:
        return self.t0 + self.dt * self.n_steps

    def refine(self, factor: int) -> "TimeGrid":
        """Same span with ``factor`` sub-steps per step."""
        return TimeGrid(self.t0, self.dt / factor, self.n_steps * factor)

    def __len__(self) -> int:
        return self.n_steps + 1


@dataclass(frozen=True)
class Trajectory:
    """Density matrices ``states[k]`` at ``times[k]``."""

    times: NDArray[np.float64]
    states: ComplexArray

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final(self) -> ComplexArray:
        return self.states[-1]

    def expect(self, op) -> ComplexArray:
        """``Tr(op rho(t))`` for every stored time."""
        return np.einsum("ij,tji->t", np.asarray(op, dtype=complex), self.states)

    def population(self, k: int) -> NDArray[np.float64]:
        return self.states[:, k, k].real.copy()


# --- vectorization and superoperators ---------------------------------------------


def vec(a: ArrayLike) -> ComplexArray:
    """Column-stack a matrix (or a stack of matrices along the leading axes)."""
    a = np.asarray(a)
    return np.swapaxes(a, -1, -2).reshape(*a.shape[:-2], -1)


def unvec(v: ArrayLike, d: int | None = None) -> ComplexArray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    if d is None:
        d = int(round(np.sqrt(v.shape[-1])))
    if d * d != v.shape[-1]:
        raise ValueError(f"vector length {v.shape[-1]} is not a square")
    return np.swapaxes(v.reshape(*v.shape[:-1], d, d), -1, -2)


def _square(a) -> ComplexArray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def spre(a) -> ComplexArray:
    """Superoperator of ``X -> A X``."""
    a = _square(a)
    return np.kron(np.eye(a.shape[0]), a)


def spost(b) -> ComplexArray:
    """Superoperator of ``X -> X B``."""
    b = _square(b)
    return np.kron(b.T, np.eye(b.shape[0]))


def sprepost(a, b) -> ComplexArray:
    """Superoperator of ``X -> A X B``."""
    a, b = _square(a), _square(b)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return np.kron(b.T, a)


def commutator_super(a) -> ComplexArray:
    """Superoperator of ``rho -> A rho - rho A``."""
    return spre(a) - spost(a)


def anticommutator_super(a) -> ComplexArray:
    """Superoperator of ``rho -> A rho + rho A``."""
    return spre(a) + spost(a)


def dissipator_super(c, rate: float = 1.0) -> ComplexArray:
    """Superoperator of ``rate * (2 C rho C^dag - {C^dag C, rho})``.

    The factor 2 convention gives an excited-state decay rate ``2 * rate`` for
    ``C = SIGMA_MINUS``.
    """
    c = _square(c)
    cdc = c.conj().T @ c
    return rate * (2.0 * sprepost(c, c.conj().T) - anticommutator_super(cdc))


def hamiltonian_super(h) -> ComplexArray:
    """Superoperator of ``rho -> -i [H, rho]``."""
    return -1j * commutator_super(h)


def apply_dissipator(c, rho, rate=1.0):
    """Apply ``rate * (2 C rho C^dag - {C^dag C, rho})`` to a (stack of) rho."""
    cd = c.conj().T
    cdc = cd @ c
    return rate * (2.0 * c @ rho @ cd - cdc @ rho - rho @ cdc)


# --- norms and state checks ------------------------------------------------------


def trace_norm(a) -> float:
    """Sum of singular values."""
    a = np.asarray(a, dtype=complex)
    try:
        s = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    return float(np.sum(s, axis=-1)) if s.ndim == 1 else np.sum(s, axis=-1)


def hermiticity_error(rho) -> float:
    rho = np.asarray(rho)
    return float(np.max(np.abs(rho - np.swapaxes(rho, -1, -2).conj()), initial=0.0))


def ket2dm(psi) -> ComplexArray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def check_density_matrix(rho, *, tol_herm=TOL_HERM, tol_tr=TOL_TRACE, tol_pos=TOL_POS) -> ComplexArray:
    """Validate and return ``rho`` as a complex array.

    Raises
    ------
    InvariantError
        If Hermiticity, unit trace or positivity fail beyond tolerance.
    """
    rho = _square(rho)
    if not np.all(np.isfinite(rho)):
        raise InvariantError("density matrix has non-finite entries")
    herm = hermiticity_error(rho)
    if herm > tol_herm:
        raise InvariantError(f"density matrix not Hermitian (max |rho - rho^dag| = {herm:.3e})")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > tol_tr:
        raise InvariantError(f"density matrix trace {tr!r} differs from 1")
    lam = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lam < -tol_pos:
        raise InvariantError(f"density matrix has negative eigenvalue {lam:.3e}")
    return rho


def check_trajectory(rhos, *, tol_tr=1e-8, tol_herm=1e-9, tol_pos=None, scale=10.0, t=None):
    """Check invariants along a trajectory of shape ``(n, d, d)``.

    Breaches beyond ``scale`` times the tolerance raise :class:`InvariantError`
    naming the first offending index.  ``tol_pos=None`` skips positivity.
    """
    rhos = np.asarray(rhos)
    tr_err = np.abs(np.trace(rhos, axis1=-2, axis2=-1) - 1.0)
    herm_err = np.max(np.abs(rhos - np.swapaxes(rhos, -1, -2).conj()), axis=(-2, -1))
    bad = np.flatnonzero((tr_err > scale * tol_tr) | (herm_err > scale * tol_herm))
    if tol_pos is not None:
        lam = np.linalg.eigvalsh(0.5 * (rhos + np.swapaxes(rhos, -1, -2).conj()))[:, 0]
        bad = np.union1d(bad, np.flatnonzero(lam < -scale * tol_pos))
    if bad.size:
        k = int(bad[0])
        when = "" if t is None else f" (t = {t[k]:.6g})"
        raise InvariantError(
            f"invariant breach at output index {k}{when}; reduce the step size",
            step=k,
            time=None if t is None else float(t[k]),
        )


def random_density_matrix(d: int, rng: np.random.Generator, rank: int | None = None) -> ComplexArray:
    """Random density matrix from a Ginibre ensemble."""
    rank = d if rank is None else rank
    g = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def gell_mann_basis(d: int) -> ComplexArray:
    """Orthonormal Hermitian basis ``G_0 = 1/sqrt(d)``, then traceless elements.

    Ordering: symmetric off-diagonal, antisymmetric off-diagonal (both by
    ``(j, k)`` with ``j < k``), then diagonal. ``Tr(G_i G_j) = delta_ij``.
    """
    basis = [np.eye(d, dtype=complex) / np.sqrt(d)]
    for j in range(d):
        for k in range(j + 1, d):
            m = np.zeros((d, d), dtype=complex)
            m[j, k] = m[k, j] = 1 / np.sqrt(2)
            basis.append(m)
    for j in range(d):
        for k in range(j + 1, d):
            m = np.zeros((d, d), dtype=complex)
            m[j, k] = -1j / np.sqrt(2)
            m[k, j] = 1j / np.sqrt(2)
            basis.append(m)
    for l in range(1, d):
        diag = np.zeros(d)
        diag[:l] = 1.0
        diag[l] = -l
        basis.append(np.diag(diag / np.sqrt(l * (l + 1))).astype(complex))
    return np.array(basis)


# --- integrators -------------------------------------------------------------------


def rk4_step(rhs: Callable, t: float, y, h: float):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs: Callable, y0, grid: TimeGrid, substeps: int = 1, *, post_step: Callable | None = None):
    """Classical fixed-step RK4, sampled at every grid point.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, y)`` returning an array shaped like ``y``.
    y0 : array_like
        Initial state (any shape).
    grid : TimeGrid
    substeps : int
        Number of RK4 steps per grid step.
    post_step : callable, optional
        ``post_step(t, y) -> y`` applied after every RK4 step (renormalization).

    Returns
    -------
    ndarray of shape ``(grid.n_steps + 1,) + y0.shape``.
    """
    y = np.array(y0, dtype=complex)
    out = np.empty((grid.n_steps + 1,) + y.shape, dtype=complex)
    out[0] = y
    h = grid.dt / substeps
    for k in range(grid.n_steps):
        t = grid.t0 + k * grid.dt
        for j in range(substeps):
            y = rk4_step(rhs, t + j * h, y, h)
            if post_step is not None:
                y = post_step(t + (j + 1) * h, y)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"non-finite state at step {k + 1}", step=k + 1, time=t + grid.dt)
        out[k + 1] = y
    return out


def volterra_integrate(kernel, grid: TimeGrid, y0: complex = 1.0, rate: complex = 0.0):
    """Solve ``y'(t) = -rate * y(t) - int_0^t k(t - s) y(s) ds`` on a uniform grid.

    Second-order scheme: trapezoid rule for the memory integral and for the
    time stepping, implicit in the new value (a scalar linear solve).

    Parameters
    ----------
    kernel : callable or array_like
        ``k(tau)`` or its samples at ``tau = j * dt``, ``j = 0..n_steps``.
    grid : TimeGrid
    y0 : complex
    rate : complex
        Local (memoryless) coefficient.

    Returns
    -------
    y, ydot : complex arrays of length ``n_steps + 1``.
    """
    n = grid.n_steps
    h = grid.dt
    lags = h * np.arange(n + 1)
    if callable(kernel):
        k = np.asarray(kernel(lags), dtype=complex)
        if k.shape != lags.shape:
            k = np.array([kernel(x) for x in lags], dtype=complex)
    else:
        k = np.asarray(kernel, dtype=complex)
        if k.shape != (n + 1,):
            raise ValueError("kernel samples must have length n_steps + 1")
    y = np.zeros(n + 1, dtype=complex)
    f = np.zeros(n + 1, dtype=complex)
    y[0] = y0
    f[0] = -rate * y0
    denom = 1.0 + 0.5 * h * rate + 0.25 * h * h * k[0]
    for m in range(n):
        # memory integral at t_{m+1} without the implicit endpoint term
        kp = 0.5 * k[m + 1] * y[0]
        if m >= 1:
            kp += np.dot(k[m:0:-1], y[1 : m + 1])
        kp *= h
        y[m + 1] = (y[m] + 0.5 * h * (f[m] - kp)) / denom
        f[m + 1] = -rate * y[m + 1] - kp - 0.5 * h * k[0] * y[m + 1]
        if not np.isfinite(y[m + 1]) or abs(y[m + 1]) > 1e8 * max(1.0, abs(y0)):
            raise NumericalError(
                f"Volterra stepping unstable at step {m + 1}; use a finer grid",
                step=m + 1,
                time=grid.t0 + (m + 1) * h,
            )
    return y, f

