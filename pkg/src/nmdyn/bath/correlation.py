"""Bath correlation functions, exponential-sum expansions and Markov rates.

Kernels follow ``alpha_T(t) = int_0^inf J(w) [coth(beta w / 2) cos(w t) - i sin(w t)] dw``
and its split ``alpha_T = alpha_minus + alpha_plus`` with weights ``n + 1`` and ``n``.
All oscillatory integrals go through QUADPACK's Fourier-weighted rules
(QAWO on finite ranges, QAWF on semi-infinite ones).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import integrate, optimize

from ..errors import FitError, NumericalError
from .spectral import BathSpec, Drude, SpectralDensity


@dataclass(frozen=True)
class CorrelationSum:
    """``alpha(t) = sum_m c_m exp(-mu_m t)`` for ``t >= 0``, ``alpha(-t) = alpha(t)*``."""

    coeffs: NDArray[np.complex128]
    rates: NDArray[np.complex128]

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=complex))
        mu = np.atleast_1d(np.asarray(self.rates, dtype=complex))
        if c.shape != mu.shape or c.ndim != 1 or c.size == 0:
            raise ValueError("CorrelationSum needs matching, nonempty coefficient and rate lists")
        if np.any(mu.real <= 0):
            raise ValueError("every decay rate needs a positive real part")
        if np.sum(c).real < -1e-12 * np.sum(np.abs(c)):
            raise ValueError("alpha(0) must have a nonnegative real part")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "rates", mu)

    @classmethod
    def single(cls, g: complex, omega: complex) -> "CorrelationSum":
        """The kernel ``g * exp(-omega t)``."""
        return cls(np.array([g]), np.array([omega]))

    def __len__(self) -> int:
        return self.coeffs.size

    @property
    def alpha0(self) -> complex:
        return complex(np.sum(self.coeffs))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        ta = np.abs(t)[..., None]
        val = np.sum(self.coeffs * np.exp(-self.rates * ta), axis=-1)
        return np.where(t >= 0, val, np.conj(val))


Kernel = Callable[[np.ndarray], np.ndarray] | CorrelationSum


def kernel_values(alpha, t) -> NDArray[np.complex128]:
    """Evaluate a kernel (``CorrelationSum`` or callable) on an array of times."""
    t = np.asarray(t, dtype=float)
    out = alpha(t)
    out = np.asarray(out, dtype=complex)
    if out.shape != t.shape:
        out = np.array([complex(alpha(x)) for x in t.ravel()]).reshape(t.shape)
    return out


# --- oscillatory quadrature ----------------------------------------------------------


def _safe(f):
    """Wrap an integrand so that omega = 0 evaluates as a limit from the right."""

    def g(w):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            val = f(max(w, 1e-300))
        return float(val) if np.isfinite(val) else 0.0

    return g


def _quad(f, a, b, *, weight=None, wvar=None, scale=1.0, what="integral"):
    """QUADPACK call that converts non-convergence into :class:`NumericalError`."""
    kwargs = dict(limit=2000)
    if weight is not None:
        kwargs.update(weight=weight, wvar=wvar)
        if np.isinf(b):
            kwargs = dict(weight=weight, wvar=wvar, limlst=200, limit=2000)
        else:
            kwargs["maxp1"] = 200
    epsabs = 1e-13 * max(scale, 1e-300)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        val, err = integrate.quad(f, a, b, epsabs=epsabs, epsrel=1e-11, **kwargs)
    if not np.isfinite(val):
        raise NumericalError(f"{what}: quadrature returned a non-finite value", residual=err)
    if caught and err > 1e-7 * max(scale, abs(val), 1e-300):
        raise NumericalError(f"{what}: quadrature did not converge (error estimate {err:.3e})", residual=err)
    return val


def fourier_integral(f, t: float, kind: str, upper: float, scale: float | None = None) -> float:
    """``int_0^upper f(w) cos(w t) dw`` (``kind="cos"``) or the ``sin`` analogue.

    ``upper = inf`` is only used for the Drude tail; callers split the range so
    that the semi-infinite rule never starts at zero.
    """
    g = _safe(f)
    if scale is None:
        scale = _scale_of(f, upper)
    if t == 0.0:
        if kind == "sin":
            return 0.0
        return _quad(g, 0.0, upper, scale=scale, what="integral at t=0")
    sign = -1.0 if (t < 0 and kind == "sin") else 1.0
    val = _quad(g, 0.0, upper, weight=kind, wvar=abs(t), scale=scale, what=f"Fourier {kind} integral")
    if abs(val) > 1.01 * scale + 1e-300:
        raise NumericalError(f"Fourier {kind} integral at t = {t}: result exceeds the L1 bound", residual=abs(val))
    return sign * val


def _scale_of(f, upper):
    g = _safe(f)
    return abs(_quad(lambda w: abs(g(w)), 0.0, upper, scale=1e-30, what="scale")) or 1.0


class _Transform:
    """``int_0^inf f(w) exp(-+ i w t) dw`` pieces for one integrand.

    Finite-support densities are integrated on ``[0, finite_support]``.  The
    Drude density is split at ``split = 100 gamma``: QAWO below, QAWF above.
    """

    def __init__(self, f, J: SpectralDensity):
        self.f = f
        if isinstance(J, Drude) and J.omega_max is None:
            self.top, self.tail = 100.0 * J.gamma, True
        else:
            self.top, self.tail = J.finite_support(), False
        self.scale = _scale_of(f, self.top)

    def part(self, t: float, kind: str) -> float:
        if self.tail and t == 0.0 and kind == "cos":
            raise NumericalError("the untruncated Drude kernel diverges logarithmically at t = 0")
        val = fourier_integral(self.f, t, kind, self.top, self.scale)
        if self.tail and t != 0.0:
            g = _safe(self.f)
            shifted = lambda w: g(w + self.top)  # noqa: E731
            c, s = np.cos(abs(t) * self.top), np.sin(abs(t) * self.top)
            ic = _quad(shifted, 0.0, np.inf, weight="cos", wvar=abs(t), scale=self.scale, what="tail")
            is_ = _quad(shifted, 0.0, np.inf, weight="sin", wvar=abs(t), scale=self.scale, what="tail")
            sign = -1.0 if (t < 0 and kind == "sin") else 1.0
            tail = c * ic - s * is_ if kind == "cos" else s * ic + c * is_
            val += sign * tail
        return val

    def exp_minus(self, t):
        return self.part(t, "cos") - 1j * self.part(t, "sin")


def correlation_zero_T(J: SpectralDensity, t) -> complex | NDArray[np.complex128]:
    """``alpha(t) = int_0^inf J(w) exp(-i w t) dw``."""
    tr = _Transform(J, J)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.array([tr.exp_minus(x) for x in ts])
    return complex(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))


def _coth_half(beta):
    def weight(w):
        return 1.0 / np.tanh(0.5 * beta * w)

    return weight


def correlation_thermal(bath: BathSpec, t):
    """``alpha_T(t)`` at inverse temperature ``bath.beta``; delegates to T = 0 for beta = inf."""
    bath.require_bosonic()
    if bath.zero_temperature:
        return correlation_zero_T(bath.J, t)
    J = bath.J
    coth = _coth_half(bath.beta)
    re = _Transform(lambda w: J(w) * coth(w), J)
    im = _Transform(J, J)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.array([re.part(x, "cos") - 1j * im.part(x, "sin") for x in ts])
    return complex(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))


def thermal_pair(bath: BathSpec, t):
    """The pair ``(alpha_minus(t), alpha_plus(t))``.

    ``alpha_minus = int J (n + 1) exp(-i w t) dw`` and
    ``alpha_plus = int J n exp(+i w t) dw``; at T = 0 ``alpha_plus = 0``.
    """
    bath.require_bosonic()
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if bath.zero_temperature:
        am = np.atleast_1d(correlation_zero_T(bath.J, ts))
        ap = np.zeros_like(am)
    else:
        J, beta = bath.J, bath.beta
        plus = _Transform(lambda w: J(w) / np.expm1(beta * w), J)
        minus = _Transform(lambda w: J(w) / np.expm1(beta * w) + J(w), J)
        am = np.array([minus.exp_minus(x) for x in ts])
        ap = np.array([np.conj(plus.exp_minus(x)) for x in ts])
    if np.ndim(t) == 0:
        return complex(am[0]), complex(ap[0])
    return am.reshape(np.shape(t)), ap.reshape(np.shape(t))


# --- Matsubara expansion of the Drude kernel ---------------------------------------


def matsubara_terms(bath: BathSpec, m_max: int) -> CorrelationSum:
    """Drude kernel truncated after ``m_max`` Matsubara terms.

    ``c_0 = (lam gamma^2 / 4)(cot(beta gamma / 2) - i)`` with ``mu_0 = gamma``, and
    ``c_m = (lam gamma^2 / beta) nu_m / (nu_m^2 - gamma^2)``, ``nu_m = 2 pi m / beta``.
    The normalization matches :class:`~nmdyn.bath.spectral.Drude` exactly.
    """
    if not isinstance(bath.J, Drude):
        raise ValueError("Matsubara expansion requires a Drude spectral density")
    if bath.J.omega_max is not None:
        raise ValueError("Matsubara expansion assumes the untruncated Drude density")
    if bath.zero_temperature:
        raise ValueError("Matsubara expansion requires finite temperature")
    if m_max < 0:
        raise ValueError("m_max must be >= 0")
    bath.require_bosonic()
    lam, gam, beta = bath.J.lam, bath.J.gamma, bath.beta
    pref = lam * gam**2
    coeffs = [0.25 * pref * (1.0 / np.tan(0.5 * beta * gam) - 1j)]
    rates = [gam]
    for m in range(1, m_max + 1):
        nu = 2 * np.pi * m / beta
        if abs(nu - gam) <= 1e-10 * gam:
            raise ValueError(
                f"Matsubara frequency {m} coincides with gamma (beta = 2 pi m / gamma); perturb beta slightly"
            )
        coeffs.append(pref / beta * nu / (nu**2 - gam**2))
        rates.append(nu)
    return CorrelationSum(np.array(coeffs, dtype=complex), np.array(rates, dtype=complex))


def matsubara_window(bath: BathSpec, n: int = 200) -> NDArray[np.float64]:
    """Comparison times for the convergence loop.

    The Drude kernel has a logarithmic singularity at t = 0, so the window starts
    at ``0.1 / gamma`` and ends at ``10 / gamma``.
    """
    gam = bath.J.gamma
    return np.linspace(0.1 / gam, 10.0 / gam, n)


@lru_cache(maxsize=16)
def _window_reference(bath: BathSpec) -> NDArray[np.complex128]:
    ref = correlation_thermal(bath, matsubara_window(bath))
    ref.setflags(write=False)
    return ref


def matsubara_expansion(bath: BathSpec, m_max: int | None = None, tol: float = 1e-6, max_terms: int = 5000,
                        reference: NDArray | None = None) -> CorrelationSum:
    """Drude Matsubara expansion, with ``m_max`` chosen automatically when ``None``.

    The automatic loop increases ``m_max`` until the maximum deviation from the
    quadrature kernel on :func:`matsubara_window` drops below ``tol * |c_0|``.
    """
    if m_max is not None:
        return matsubara_terms(bath, m_max)
    times = matsubara_window(bath)
    if reference is None:
        reference = _window_reference(bath)
    scale = abs(matsubara_terms(bath, 0).coeffs[0])
    m = 0
    while True:
        expansion = matsubara_terms(bath, m)
        if np.max(np.abs(expansion(times) - reference)) < tol * scale:
            return expansion
        if m >= max_terms:
            raise NumericalError(f"Matsubara sum not converged after {max_terms} terms")
        m = m + 1 if m < 16 else int(m * 1.25)


# --- Markov rate ---------------------------------------------------------------------


def markov_rate(alpha, t_cut: float) -> complex:
    """``Gamma = int_0^{t_cut} alpha(tau) d tau``.

    Emits a ``RuntimeWarning`` when ``|alpha(t_cut)| > 1e-10 |alpha(0)|``.
    """
    a0 = abs(complex(kernel_values(alpha, np.array([0.0]))[0]))
    tail = abs(complex(kernel_values(alpha, np.array([t_cut]))[0]))
    if tail > 1e-10 * a0:
        warnings.warn(
            f"kernel not decayed at t_cut = {t_cut}: |alpha(t_cut)| / |alpha(0)| = {tail / max(a0, 1e-300):.2e}",
            RuntimeWarning,
            stacklevel=2,
        )
    if a0 == 0.0 and tail == 0.0:
        probe = kernel_values(alpha, np.linspace(0, t_cut, 33))
        if not np.any(probe):
            return 0j
    re = _quad(lambda x: complex(kernel_values(alpha, np.array([x]))[0]).real, 0.0, t_cut, scale=a0 * t_cut, what="rate")
    im = _quad(lambda x: complex(kernel_values(alpha, np.array([x]))[0]).imag, 0.0, t_cut, scale=a0 * t_cut, what="rate")
    return complex(re, im)


# --- exponential fit -----------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    expansion: CorrelationSum
    residual: float


def _prony(y, dt, n_exp):
    k = y.size
    rows = k // 2
    hankel = np.array([y[i : i + k - rows] for i in range(rows)])
    u, _, _ = np.linalg.svd(hankel, full_matrices=False)
    un = u[:, :n_exp]
    phi, *_ = np.linalg.lstsq(un[:-1], un[1:], rcond=None)
    z = np.linalg.eigvals(phi)
    z = np.where(np.abs(z) >= 1.0, 0.999 * z / np.abs(z), z)
    z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    mu = -np.log(z) / dt
    vander = z[None, :] ** np.arange(k)[:, None]
    c, *_ = np.linalg.lstsq(vander, y, rcond=None)
    return c, mu


def fit_correlation(times, samples, n_exp: int, tol: float | None = None, minimax: bool = True) -> FitResult:
    """Least-squares fit of ``alpha(t)`` samples by ``n_exp`` decaying exponentials.

    Matrix-pencil (Prony-type) initialization, Levenberg-Marquardt refinement,
    then (``minimax=True``) a minimax polish that lowers the maximum residual.
    Each rate is parameterized as ``exp(x) + i y`` so that ``Re mu > 0``.

    Raises
    ------
    FitError
        If ``tol`` is given and the maximum absolute residual exceeds it.
    """
    if n_exp < 1:
        raise ValueError("n_exp must be >= 1")
    t = np.asarray(times, dtype=float)
    y = np.asarray(samples, dtype=complex)
    if t.shape != y.shape or t.size < 2 * n_exp + 2:
        raise ValueError("need matching time/sample arrays with at least 2 n_exp + 2 points")
    if not np.all(np.isfinite(y)):
        raise ValueError("samples must be finite")
    dt = np.diff(t)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * abs(dt[0]):
        raise ValueError("fit_correlation needs a uniform time grid")
    t0 = t[0]
    c0, mu0 = _prony(y, dt[0], n_exp)
    c0 = c0 * np.exp(mu0 * t0)

    def unpack(p):
        mu = np.exp(p[:n_exp]) + 1j * p[n_exp : 2 * n_exp]
        c = p[2 * n_exp : 3 * n_exp] + 1j * p[3 * n_exp :]
        return c, mu

    def resid(p):
        c, mu = unpack(p)
        r = np.exp(-np.outer(t, mu)) @ c - y
        return np.concatenate([r.real, r.imag])

    def cres(p):
        c, mu = unpack(p)
        return np.exp(-np.outer(t, mu)) @ c - y

    p0 = np.concatenate([np.log(np.maximum(mu0.real, 1e-8)), mu0.imag, c0.real, c0.imag])
    candidates = [p0]
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            sol = optimize.least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
            candidates.append(sol.x)
        except ValueError:
            pass
        if minimax:
            # Epigraph form of min max |r_k|, started from the least-squares optimum.
            start = candidates[-1]
            q0 = np.concatenate([start, [np.max(np.abs(cres(start)))]])
            cons = {"type": "ineq", "fun": lambda q: q[-1] ** 2 - np.abs(cres(q[:-1])) ** 2}
            mm = optimize.minimize(lambda q: q[-1], q0, constraints=[cons], method="SLSQP",
                                   options={"maxiter": 2000, "ftol": 1e-14})
            if np.all(np.isfinite(mm.x)):
                candidates.append(mm.x[:-1])
    scores = [np.max(np.abs(cres(p))) for p in candidates]
    scores = [x if np.isfinite(x) else np.inf for x in scores]
    best = candidates[int(np.argmin(scores))]
    c, mu = unpack(best)
    residual = float(min(scores))
    if tol is not None and residual > tol:
        raise FitError(f"exponential fit residual {residual:.3e} exceeds tolerance {tol:.3e}", residual=residual)
    order = np.argsort(mu.real)
    return FitResult(CorrelationSum(c[order], mu[order]), residual)
