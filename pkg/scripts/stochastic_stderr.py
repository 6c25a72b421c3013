"""Standard error of linear and nonlinear HOPS and of SLN as a function of ensemble size."""
import sys

sys.path.insert(0, "src")

import numpy as np  # noqa: E402

from nmdyn.bath import BathSpec, CorrelationSum, Drude, matsubara_terms  # noqa: E402
from nmdyn.core import SIGMA_MINUS, SIGMA_X, SIGMA_Z, TimeGrid  # noqa: E402
from nmdyn.mastereq import SystemSpec  # noqa: E402
from nmdyn.stochastic import hops_ensemble, sln_ensemble  # noqa: E402

plus = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2)
decay = SystemSpec(np.zeros((2, 2)), (SIGMA_MINUS,))
grid = TimeGrid.from_span(5.0, 0.02)
kernel = CorrelationSum.single(0.5, 1.0)
spin_boson = SystemSpec(-0.5 * SIGMA_X, (SIGMA_Z,))
drude = matsubara_terms(BathSpec(Drude(lam=0.01, gamma=1.0), beta=0.1), 1)
for n in (250, 1000, 4000):
    lin = hops_ensemble(decay, None, kernel, plus, grid, 3, n, 1)
    nl = hops_ensemble(decay, None, kernel, plus, grid, 3, n, 1, nonlinear=True)
    sln = sln_ensemble(spin_boson, None, drude, np.diag([1.0, 0.0]).astype(complex), grid, n, 1)
    print(f"n {n:5d}  HOPS linear {lin.stderr.max():.4f}  nonlinear {nl.stderr.max():.4f}  SLN {sln.stderr.max():.4f}",
          flush=True)
