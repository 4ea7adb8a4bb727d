import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy import integrate

from kschaos.densities import InitialDensitySpec
from kschaos.noise import STREAM_AUX, STREAM_BROWNIAN, STREAM_INITIAL, NoisePlan, derive_replica_seed, mix64


def test_noise_replayable_and_order_independent():
    plan = NoisePlan(123, 1e-3, replica=4)
    a = [plan.increments(50, k) for k in range(10)]
    b = [plan.increments(50, k) for k in reversed(range(10))][::-1]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    with ThreadPoolExecutor(4) as pool:
        c = list(pool.map(lambda k: plan.increments(50, k), range(10)))
    for x, y in zip(a, c):
        np.testing.assert_array_equal(x, y)


def test_noise_prefix_stable_in_particle_count():
    plan = NoisePlan(9, 1e-3)
    np.testing.assert_array_equal(plan.normals(10, 3), plan.normals(20, 3)[:10])


def test_noise_streams_and_replicas_differ():
    plan = NoisePlan(5, 1e-3)
    base = plan.normals(8, 0, STREAM_BROWNIAN)
    for other in (plan.normals(8, 0, STREAM_INITIAL), plan.normals(8, 0, STREAM_AUX),
                  plan.normals(8, 1), plan.for_replica(1).normals(8, 0), NoisePlan(6, 1e-3).normals(8, 0)):
        assert not np.array_equal(base, other)


def test_noise_statistics():
    plan = NoisePlan(77, 0.01)
    x = np.concatenate([plan.increments(1000, k) for k in range(100)])
    assert abs(x.mean()) < 4 * math.sqrt(0.02 / x.size)
    assert x.var() == pytest.approx(0.02, rel=0.02)
    # independence across particles, components and steps
    c = np.corrcoef(np.stack([x[:-1, 0], x[1:, 0], x[:-1, 1]]))
    assert np.all(np.abs(c[np.triu_indices(3, 1)]) < 0.02)


def test_noise_validation():
    with pytest.raises(ValueError):
        NoisePlan(-1, 0.1)
    with pytest.raises(ValueError):
        NoisePlan(1, -0.1)
    np.testing.assert_array_equal(NoisePlan(1, 0.0).increments(3, 0), np.zeros((3, 2)))


def test_replica_seed_derivation():
    assert mix64(1, 2) == mix64(1, 2) != mix64(2, 1)
    seeds = {derive_replica_seed(42, c, r) for c in range(5) for r in range(50)}
    assert len(seeds) == 250
    assert all(0 <= s < 2**64 for s in seeds)


# ---------------------------------------------------------------------------


def test_density_validation():
    with pytest.raises(ValueError):
        InitialDensitySpec("cauchy")
    with pytest.raises(ValueError):
        InitialDensitySpec.gaussian(0.0)
    with pytest.raises(ValueError):
        InitialDensitySpec.disc(-1.0)
    with pytest.raises(ValueError):
        InitialDensitySpec.mixture([(0, 0), (1, 1)], [1.0, 1.0], [0.3, 0.3])


@pytest.mark.parametrize(
    "spec",
    [
        InitialDensitySpec.gaussian(0.7, (0.3, -0.2)),
        InitialDensitySpec.disc(1.3, (0.5, 0.0)),
        InitialDensitySpec.mixture([(-1, 0), (1, 0.5)], [0.3, 0.6], [0.4, 0.6]),
    ],
)
def test_density_closed_forms_match_quadrature(spec):
    R = 8.0
    pdf = lambda y, x: float(spec.pdf(np.array([x, y])))  # noqa: E731
    opts = dict(epsabs=1e-10, epsrel=1e-10)
    if spec.kind == "disc":
        cx, cy = spec.means[0]
        rr = spec.radius
        mass = integrate.dblquad(pdf, cx - rr, cx + rr, lambda x: cy - math.sqrt(max(rr * rr - (x - cx) ** 2, 0)),
                                 lambda x: cy + math.sqrt(max(rr * rr - (x - cx) ** 2, 0)), **opts)[0]
        m2 = integrate.dblquad(lambda y, x: (x * x + y * y) * pdf(y, x), cx - rr, cx + rr,
                               lambda x: cy - math.sqrt(max(rr * rr - (x - cx) ** 2, 0)),
                               lambda x: cy + math.sqrt(max(rr * rr - (x - cx) ** 2, 0)), **opts)[0]
    else:
        mass = integrate.dblquad(pdf, -R, R, -R, R, **opts)[0]
        m2 = integrate.dblquad(lambda y, x: (x * x + y * y) * pdf(y, x), -R, R, -R, R, **opts)[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
    assert m2 == pytest.approx(spec.second_moment(), rel=1e-6)
    if spec.kind != "mixture":
        ent = integrate.dblquad(
            lambda y, x: (lambda p: p * math.log(p) if p > 0 else 0.0)(pdf(y, x)), -R, R, -R, R, **opts
        )[0] if spec.kind == "gaussian" else spec.sup_norm() * math.log(spec.sup_norm()) * math.pi * spec.radius**2
        assert ent == pytest.approx(spec.entropy(), rel=1e-6)
    else:
        with pytest.raises(NotImplementedError):
            spec.entropy()


def test_cell_averages_sum_to_mass():
    edges = np.linspace(-6, 6, 97)
    for spec in (InitialDensitySpec.gaussian(1.0), InitialDensitySpec.disc(1.0)):
        avg = spec.cell_averages(edges)
        assert avg.sum() * (edges[1] - edges[0]) ** 2 == pytest.approx(1.0, rel=1e-3)
    g = InitialDensitySpec.gaussian(0.3, (1.06, 0.0)).cell_averages(edges)
    ix, iy = np.unravel_index(np.argmax(g), g.shape)
    assert edges[ix] < 1.06 < edges[ix + 1]  # first index is x


def test_sampling_moments_and_determinism():
    noise = NoisePlan(2024, 1e-3)
    g = InitialDensitySpec.gaussian(1.5)
    x = g.sample(10_000, noise)
    r2 = np.sum(x * x, axis=1)
    assert abs(r2.mean() - 2 * 1.5**2) <= 3 * r2.std() / math.sqrt(r2.size)
    np.testing.assert_array_equal(x, g.sample(10_000, noise))
    d = InitialDensitySpec.disc(2.0).sample(10_000, noise)
    assert np.all(np.hypot(*d.T) <= 2.0)
    se = d.std(axis=0) / math.sqrt(d.shape[0])
    assert np.all(np.abs(d.mean(axis=0)) <= 3 * se)
    m = InitialDensitySpec.mixture([(-3, 0), (3, 0)], [0.1, 0.1], [0.25, 0.75]).sample(20_000, noise)
    assert np.mean(m[:, 0] > 0) == pytest.approx(0.75, abs=0.015)
