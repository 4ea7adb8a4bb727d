"""A miniature convergence sweep with rate fits.

The full reference sweep (N up to 4096, 50 replicas, T = 0.5) is run by the
acceptance tests and by `kschaos sweep`; this one is small enough for a laptop
minute. Outputs land in ./demo_sweep.
"""
import math

from kschaos.config import ExperimentConfig
from kschaos.harness import fit_rate, run_sweep

cfg = ExperimentConfig(n_values=(64, 256, 1024), chi_values=(4 * math.pi,), T=0.1, replicas=8, n_g=128, seed=7)
res = run_sweep(cfg, out="demo_sweep")
print("    N   median sup   tail    W1 (particles)   W1 (control)   LoLN K")
for c in res.cells:
    print(f"{c.N:5d} {c.median_sup:12.5f} {c.tail.estimate:6.2f} {c.w1_median:16.4f} {c.w1_control_median:14.4f} {c.loln_median:8.4f}")
Ns = [c.N for c in res.cells]
for name in ("median_sup", "w1_median", "loln_median"):
    fit = fit_rate(Ns, [getattr(c, name) for c in res.cells])
    lo, hi = fit.ci()
    print(f"{name:12s} ~ N^{fit.exponent:.3f}  (95% CI {lo:.3f} .. {hi:.3f})")
print("manifest:", res.manifest()["config_hash"][:16], "written to", res.out)
