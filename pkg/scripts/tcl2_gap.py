"""Second-order TCL against the exact decay of an exponential zero-temperature kernel.

Prints the maximum population error on [0, 10/gamma] for several g/gamma^2 at fixed gamma,
together with the leading estimate 2 (g/gamma^2)^2 (gamma t) exp(-2 g t / gamma) at t = 10/gamma.
"""
import sys

sys.path.insert(0, "src")
sys.path.insert(0, "tests")

import numpy as np  # noqa: E402

from oracles import exponential_amplitude  # noqa: E402
from nmdyn.bath import CorrelationSum  # noqa: E402
from nmdyn.core import SIGMA_MINUS, TimeGrid  # noqa: E402
from nmdyn.mastereq import SystemSpec, tcl2_evolve  # noqa: E402

system = SystemSpec(np.zeros((2, 2)), (SIGMA_MINUS,))
excited = np.diag([1.0, 0.0]).astype(complex)
for gam in (1.0, 2.0):
    for ratio in (0.0025, 0.005, 0.01, 0.02):
        g = ratio * gam**2
        grid = TimeGrid.from_span(10 / gam, 0.01 / gam)
        pop = tcl2_evolve(system, CorrelationSum.single(g, gam), excited, grid).states[:, 0, 0].real
        err = np.max(np.abs(pop - np.abs(exponential_amplitude(g, gam, grid.times)) ** 2))
        est = 2 * ratio**2 * 10 * np.exp(-20 * ratio)
        print(f"gamma {gam:3.1f}  g/gamma^2 {ratio:6.4f}  max error {err:.3e}  estimate {est:.3e}")
