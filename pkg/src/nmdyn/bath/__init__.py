"""Bath models: spectral densities, correlation functions and noise."""
from .correlation import (
    CorrelationSum,
    FitResult,
    correlation_thermal,
    correlation_zero_T,
    fit_correlation,
    kernel_values,
    markov_rate,
    matsubara_expansion,
    matsubara_terms,
    thermal_pair,
)
from .noise import (
    SLNNoise,
    draw_sln,
    noise_factor,
    sample_colored_noise,
    sample_colored_noise_batch,
    sample_sln_noise_pair,
    sln_factor,
    trajectory_rng,
)
from .spectral import BathSpec, Drude, OhmicFamily, SpectralDensity, Tabulated, eval_spectral_density

__all__ = [
    "BathSpec", "CorrelationSum", "Drude", "FitResult", "OhmicFamily", "SLNNoise", "SpectralDensity",
    "Tabulated", "correlation_thermal", "correlation_zero_T", "draw_sln", "eval_spectral_density",
    "fit_correlation", "kernel_values", "markov_rate", "matsubara_expansion", "matsubara_terms",
    "noise_factor", "sample_colored_noise", "sample_colored_noise_batch", "sample_sln_noise_pair",
    "sln_factor", "thermal_pair", "trajectory_rng",
]
