"""Solving the regularised Keller-Segel equation on a grid.

The second moment of a solution grows linearly at rate 4 (1 - chi / 8 pi) as long
as the mass stays away from the cutoff scale. We check that for a few chi and
watch mass conservation and the free energy.
"""
import math

import numpy as np

from kschaos.densities import InitialDensitySpec
from kschaos.harness import linear_slope
from kschaos.kernel import CutoffSpec
from kschaos.pde import solve_pde, init_density

spec = CutoffSpec(0.25, 4096)
f0 = init_density(InitialDensitySpec.gaussian(1.0), L=16.0, n_g=128)
print(f"grid 128 x 128 on [-{f0.L:g}, {f0.L:g}]^2, cell {f0.cell:.3f}; nu = {spec.nu:.3f}")
print("\n  chi/pi   slope   target   mass drift   F non-increasing")
for chi in (0.0, 2 * math.pi, 4 * math.pi, 6 * math.pi):
    run = solve_pde(f0, chi, spec, T=0.2, dt=1e-3, report_every=10)
    tab = run.report_table()
    t, mass, m2, F = tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 5]
    slope = linear_slope(t, m2)
    drift = np.max(np.abs(mass - mass[0]))
    mono = bool(np.all(np.diff(F) <= 1e-3 * np.abs(F[:-1])))
    print(f"{chi / math.pi:8.1f} {slope:7.4f} {4 * (1 - chi / (8 * math.pi)):8.4f} {drift:12.1e}   {mono}")
