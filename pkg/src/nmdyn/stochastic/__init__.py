"""Stochastic unravelings: HOPS, SLN and non-Markovian quantum jumps."""
from .ensemble import EnsembleResult, default_workers, ensemble_average
from .hops import hops_ensemble, hops_linear_trajectory, hops_nonlinear_trajectory
from .nmqj import JumpEnsemble, nmqj_evolve
from .sln import sln_ensemble, sln_trajectory

__all__ = [
    "EnsembleResult",
    "JumpEnsemble",
    "default_workers",
    "ensemble_average",
    "hops_ensemble",
    "hops_linear_trajectory",
    "hops_nonlinear_trajectory",
    "nmqj_evolve",
    "sln_ensemble",
    "sln_trajectory",
]
