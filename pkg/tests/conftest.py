import math

import pytest
from hypothesis import settings

from kschaos.densities import InitialDensitySpec
from kschaos.kernel import CutoffSpec
from kschaos.pde import init_density, solve_pde

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

FOUR_PI = 4.0 * math.pi


class PdeCache:
    """Session-wide store of PDE solves keyed by their full parameter set."""

    def __init__(self):
        self.runs = {}

    def get(self, N, chi, alpha=0.25, T=0.5, n_g=256, L=20.0, dt=1e-3, report_every=10, sigma=1.0):
        # histories are dropped: at 256^2 and 500 steps each would hold ~0.5 GB
        key = (N, chi, alpha, T, n_g, L, dt, report_every, sigma)
        if key not in self.runs:
            f0 = init_density(InitialDensitySpec.gaussian(sigma), L, n_g)
            self.runs[key] = solve_pde(f0, chi, CutoffSpec(alpha, N), T, dt, report_every, keep_history=False)
        return self.runs[key]


@pytest.fixture(scope="session")
def pde_cache():
    return PdeCache()


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
