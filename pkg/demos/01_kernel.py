"""The regularised Coulomb kernel.

Away from the cutoff the force is exactly x / (2 pi |x|^2); inside radius 1/nu it
vanishes; in between a quintic switch blends the two. The Lipschitz majorant
l^nu(y) bounds how fast the force can change near y.
"""
import math

import numpy as np

from kschaos.kernel import CutoffSpec, force, lipschitz_majorant, measure_hessian_constant, n_body_forces, radial_table

spec = CutoffSpec(0.25, 1024)
nu = float(spec.nu)
print(f"N=1024, alpha=0.25 -> nu = {nu:.4f}, cutoff radii {1 / nu:.4f} and {2 / nu:.4f}")
print(f"measured Hessian constant C_H = {measure_hessian_constant():.5f}")

# radial profile: switch value, potential and force magnitude
tab = radial_table(spec, np.linspace(0, 3 / nu, 7))
print("\n     r        s(r)       phi(r)      |k|(r)    1/(2 pi r)")
for r, s, phi, k in zip(tab["r"], tab["s"], tab["phi"], tab["|k|"]):
    coul = 1 / (2 * math.pi * r) if r > 0 else float("inf")
    print(f"{r:8.4f} {s:10.6f} {phi:12.6f} {k:11.6f} {coul:11.6f}")

# exact Coulomb field beyond 2/nu
x = np.array([[3 / nu, 0.0], [0.0, 10.0]])
print("\nforce beyond 2/nu:", force(x, nu), "exact:", x / (2 * math.pi * np.sum(x**2, axis=1))[:, None])

# the majorant bounds finite differences of the force
y = np.array([[0.4, 0.1]])
d = np.array([[0.05, -0.02]])
diff = np.linalg.norm(force(y + d, nu) - force(y, nu))
print(f"\n|k(y+d) - k(y)| = {diff:.4e} <= l(y)|d| = {float(lipschitz_majorant(y, nu)[0]) * np.linalg.norm(d):.4e}")

# pairwise forces on a small cloud sum to zero (Newton's third law)
cloud = np.random.default_rng(0).normal(size=(500, 2))
F = n_body_forces(cloud, 4 * math.pi, spec)
print(f"net force on a 500-particle cloud: {np.abs(F.sum(axis=0)).max():.2e}")
