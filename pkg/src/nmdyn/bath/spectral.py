"""Spectral densities J(omega) and the bath specification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import NDArray


def _as_freq(omega):
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise ValueError("spectral density is defined for omega >= 0 only")
    return w


@dataclass(frozen=True)
class OhmicFamily:
    """``J = eta * omega**s * omega_c**(1 - s) * cutoff(omega / omega_c)``.

    ``cutoff`` is ``exp(-x)`` (``cutoff_shape="exponential"``) or the step
    ``theta(1 - x)`` (``"hard"``).
    """

    s: float = 1.0
    eta: float = 1.0
    omega_c: float = 1.0
    cutoff_shape: str = "exponential"
    omega_max: float | None = None

    def __post_init__(self):
        if self.s <= 0 or self.omega_c <= 0 or self.eta < 0:
            raise ValueError("OhmicFamily needs s > 0, omega_c > 0, eta >= 0")
        if self.cutoff_shape not in ("exponential", "hard"):
            raise ValueError(f"unknown cutoff shape {self.cutoff_shape!r}")

    @property
    def support(self) -> float:
        """Upper end of the support (``inf`` for the untruncated exponential cutoff)."""
        if self.omega_max is not None:
            return float(self.omega_max)
        return self.omega_c if self.cutoff_shape == "hard" else np.inf

    def finite_support(self) -> float:
        """Finite frequency beyond which J is negligible (< 1e-26 of its scale)."""
        if np.isfinite(self.support):
            return self.support
        return self.omega_c * (60.0 + 4.0 * self.s)

    def __call__(self, omega):
        w = _as_freq(omega)
        x = w / self.omega_c
        if self.cutoff_shape == "exponential":
            cut = np.exp(-x)
        else:
            cut = (x <= 1.0).astype(float)
        out = self.eta * self.omega_c * x**self.s * cut
        return np.where(w <= self.support, out, 0.0)


@dataclass(frozen=True)
class Drude:
    """Drude-Lorentz density ``J = lam * gamma**2 * omega / (2 pi (omega**2 + gamma**2))``."""

    lam: float = 1.0
    gamma: float = 1.0
    omega_max: float | None = None

    def __post_init__(self):
        if self.lam < 0 or self.gamma <= 0:
            raise ValueError("Drude needs lam >= 0 and gamma > 0")

    @property
    def support(self) -> float:
        return np.inf if self.omega_max is None else float(self.omega_max)

    def finite_support(self) -> float:
        if self.omega_max is None:
            raise ValueError("Drude density has a 1/omega tail; set omega_max for finite-support methods")
        return float(self.omega_max)

    def __call__(self, omega):
        w = _as_freq(omega)
        out = self.lam * self.gamma**2 * w / (2 * np.pi * (w**2 + self.gamma**2))
        return np.where(w <= self.support, out, 0.0)


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear density through ``(omega_k, J_k)``; zero outside the samples."""

    omega: NDArray[np.float64] = field(default_factory=lambda: np.array([0.0, 1.0]))
    values: NDArray[np.float64] = field(default_factory=lambda: np.array([1.0, 1.0]))

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        j = np.asarray(self.values, dtype=float)
        if w.ndim != 1 or w.shape != j.shape or w.size < 2:
            raise ValueError("tabulated J needs matching 1d arrays with >= 2 samples")
        if np.any(np.diff(w) <= 0) or w[0] < 0:
            raise ValueError("tabulated frequencies must be nonnegative and increasing")
        if np.any(j < 0):
            raise ValueError("tabulated J must be nonnegative")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "values", j)

    @property
    def support(self) -> float:
        return float(self.omega[-1])

    def finite_support(self) -> float:
        return self.support

    def __call__(self, omega):
        w = _as_freq(omega)
        return np.interp(w, self.omega, self.values, left=0.0, right=0.0)

    @classmethod
    def from_file(cls, path) -> "Tabulated":
        """Read two-column ``omega J`` text with ``#`` comments."""
        data = np.loadtxt(path, comments="#", ndmin=2)
        return cls(data[:, 0], data[:, 1])


SpectralDensity = Union[OhmicFamily, Drude, Tabulated]


def eval_spectral_density(J: SpectralDensity, omega):
    """Evaluate ``J(omega)``; raises ``ValueError`` for negative frequencies."""
    out = J(omega)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class BathSpec:
    """Spectral density plus temperature; ``beta = inf`` means T = 0."""

    J: SpectralDensity
    beta: float = np.inf
    statistics: str = "bosonic"

    def __post_init__(self):
        if not (self.beta > 0):
            raise ValueError("beta must be positive (use inf for zero temperature)")
        if self.statistics not in ("bosonic", "fermionic"):
            raise ValueError(f"unknown statistics {self.statistics!r}")

    @property
    def zero_temperature(self) -> bool:
        return bool(np.isinf(self.beta))

    def require_bosonic(self):
        if self.statistics != "bosonic":
            raise NotImplementedError("fermionic baths are stored but not supported by the solvers")

    def occupation(self, omega):
        """Thermal occupation ``1 / (exp(beta omega) -+ 1)`` for omega > 0."""
        w = np.asarray(omega, dtype=float)
        if self.zero_temperature:
            return np.zeros_like(w)
        x = self.beta * w
        if self.statistics == "bosonic":
            return 1.0 / np.expm1(x)
        return 1.0 / (np.exp(x) + 1.0)
