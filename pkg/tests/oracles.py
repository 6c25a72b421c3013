"""Closed-form reference solutions shared by the tests (independent of the package)."""
import numpy as np


def exp_roots(g, gam):
    disc = np.sqrt(complex(gam * gam / 4 - g))
    return -gam / 2 + disc, -gam / 2 - disc


def exponential_amplitude(g, gam, t):
    """Inverse Laplace transform of ``(s + gam) / (s^2 + gam s + g)``: ``A`` for ``alpha = g exp(-gam t)``."""
    sp, sm = exp_roots(g, gam)
    t = np.asarray(t, dtype=float)
    return (sp * np.exp(sm * t) - sm * np.exp(sp * t)) / (sp - sm)


def exponential_amplitude_dot(g, gam, t):
    sp, sm = exp_roots(g, gam)
    t = np.asarray(t, dtype=float)
    return sp * sm * (np.exp(sm * t) - np.exp(sp * t)) / (sp - sm)


def exponential_rates(g, gam, t):
    """``gamma_1 = -Re(A'/A)`` for a real exponential kernel (zero detuning)."""
    return -np.real(exponential_amplitude_dot(g, gam, t) / exponential_amplitude(g, gam, t))


def amplitude_states(A, rho0):
    rho0 = np.asarray(rho0, dtype=complex)
    out = np.empty((len(A), 2, 2), dtype=complex)
    out[:, 0, 0] = rho0[0, 0] * np.abs(A) ** 2
    out[:, 1, 1] = 1 - out[:, 0, 0]
    out[:, 0, 1] = rho0[0, 1] * A
    out[:, 1, 0] = np.conj(out[:, 0, 1])
    return out


def trace_dist(a, b):
    return 0.5 * np.sum(np.abs(np.linalg.eigvalsh(a - b)), axis=-1)
