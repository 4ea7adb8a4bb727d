"""Metrics: Wasserstein-1 in the sup norm, law-of-large-numbers residuals,
the J diagnostic and heat-kernel norms.
"""
import math

import numpy as np

from kschaos.densities import InitialDensitySpec
from kschaos.kernel import CutoffSpec
from kschaos.metrics import (
    JSchedule,
    geometric_grid,
    heat_kernel_norms,
    j_process,
    loln_statistic,
    sample_field,
    shifted_kernel_norm,
    wasserstein1,
)
from kschaos.pde import init_density

# W1 uses |.|_inf as ground metric: this pair is 0.5 apart, not 0.707
a = np.array([[0.0, 0.0], [1.0, 0.0]])
b = np.array([[0.0, 0.0], [0.0, 1.0]])
print(f"W1 of the two-point example: {wasserstein1(a, b):.3f}")

# empirical W1 between i.i.d. samples shrinks with the sample size
rng = np.random.default_rng(0)
for m in (64, 256, 1024):
    print(f"  m={m:5d}  W1(sample, sample) = {wasserstein1(rng.normal(size=(m, 2)), rng.normal(size=(m, 2))):.4f}")

# mean-field force residual on i.i.d. draws from a density
f = init_density(InitialDensitySpec.gaussian(1.0), 20.0, 128)
print("\nLoLN residual max_i |K_i - Kbar_i| on i.i.d. draws")
for N in (256, 1024, 4096):
    res = loln_statistic(sample_field(f, N, rng), f, 4 * math.pi, CutoffSpec(0.25, N))
    print(f"  N={N:5d}  K residual {res.k_stat:.4f}  threshold {res.threshold:.4f}")

# the J schedule saturates at 1 for all but astronomically large N
for N in (1024, 1e12):
    s = JSchedule(N, 0.25)
    times = np.array(geometric_grid(0.01, 1e-3, 6))
    gaps = np.tril(np.full((times.size, times.size), 1e-7), -1)
    gaps[np.triu_indices(times.size, 1)] = np.nan
    print(f"\nN={N:g}: C_N={s.C_N:.2f}, delta={s.delta:.3f}, J = {np.round(j_process(times, gaps, s, 0.01), 4)}")

# heat kernel norms follow exact power laws in t
print("\n   t      |G|_3 t^(2/3)   |grad G|_3 t^(7/6)   shifted L1 ratio")
for t in (0.01, 0.1, 1.0):
    g, dg = heat_kernel_norms(t, 3.0)
    print(f"{t:6.2f} {g * t ** (2 / 3):14.10f} {dg * t ** (7 / 6):18.10f} {shifted_kernel_norm(t, 0.01 * math.sqrt(t), 1) / 0.01:16.10f}")
