import math

import numpy as np
import pytest
from scipy import integrate

from kschaos import sde
from kschaos.densities import InitialDensitySpec
from kschaos.kernel import PROFILE, CutoffSpec, n_body_forces
from kschaos.noise import NoisePlan
from kschaos.pde import ForceHistory, init_density, solve_pde
from kschaos.sde import (
    CoupledRunConfig,
    CoupledState,
    NonFiniteState,
    ParticleEnsemble,
    check_step,
    default_step,
    run_coupled,
    sample_initial,
    spawn_intermediate,
    step_coupled,
    step_meanfield,
    step_real,
)


@pytest.fixture(scope="module")
def small_pde():
    spec = CutoffSpec(0.25, 64)
    f0 = init_density(InitialDensitySpec.gaussian(1.0), 10.0, 64)
    return solve_pde(f0, 4 * math.pi, spec, 0.05, default_step(spec), report_every=10)


def zero_history(spec, dt=1e-3):
    f0 = init_density(InitialDensitySpec.gaussian(1.0), 10.0, 32)
    h = ForceHistory(f0.L, f0.n_g, dt, spec, 0.0)
    h.append(f0)
    return h


def test_ensemble_validation():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((3, 3)))
    e = ParticleEnsemble([[1.0, 0.0], [0.0, 2.0]])
    assert e.n == 2 and e.mean_sq_radius() == pytest.approx(2.5)


def test_default_step_and_cap():
    spec = CutoffSpec(0.25, 4096, nu=20.0)
    assert default_step(spec) == pytest.approx(0.1 / 400)
    assert default_step(CutoffSpec(0.25, 4096)) == 1e-3
    check_step(default_step(spec), spec)
    with pytest.raises(ValueError):
        check_step(0.01, spec)


def test_pure_brownian_increment_variance():
    spec = CutoffSpec(0.25, 100_000)
    h = 1e-3
    noise = NoisePlan(11, h)
    X = ParticleEnsemble(np.zeros((100_000, 2)))
    X1, _ = step_real(X, 0.0, spec, noise, 0)
    d = X1.positions.ravel()
    se = math.sqrt(2 * (2 * h) ** 2 / d.size)
    assert abs(d.var() - 2 * h) <= 3 * se
    assert X1.time == pytest.approx(h)


def test_step_with_zero_h_is_identity():
    spec = CutoffSpec(0.25, 10)
    X = ParticleEnsemble(np.random.default_rng(0).normal(size=(10, 2)))
    X1, _ = step_real(X, 4 * math.pi, spec, NoisePlan(1, 0.0), 0)
    np.testing.assert_array_equal(X1.positions, X.positions)
    Y1 = step_meanfield(X, zero_history(spec), NoisePlan(1, 0.0), 0)
    np.testing.assert_array_equal(Y1.positions, X.positions)


def test_two_body_deterministic_step():
    spec = CutoffSpec(0.25, 2, nu=10.0)
    h = 1e-3
    X = ParticleEnsemble(np.array([[0.0, 0.0], [1.0, 0.0]]))
    X1, close = step_real(X, 4 * math.pi, spec, NoisePlan(0, h), 0, dw=np.zeros((2, 2)))
    np.testing.assert_allclose(X1.positions, [[h, 0.0], [1.0 - h, 0.0]], rtol=1e-14)
    assert close == 0


def test_second_moment_change_of_one_drift_step():
    # pairs beyond 2/nu: x . k(x) = 1/(2 pi) for every pair
    rng = np.random.default_rng(3)
    N, chi, h = 40, 4 * math.pi, 1e-3
    spec = CutoffSpec(0.25, N, nu=200.0)
    while True:
        pos = rng.uniform(-2, 2, (N, 2))
        d = np.hypot(*(pos[:, None] - pos[None]).transpose(2, 0, 1))
        if np.all(d[~np.eye(N, dtype=bool)] > 2 / spec.nu):
            break
    X = ParticleEnsemble(pos)
    X1, _ = step_real(X, chi, spec, NoisePlan(0, h), 0, dw=np.zeros((N, 2)))
    K = n_body_forces(pos, chi, spec)
    expected = -h * chi * (N - 1) / (2 * math.pi * N) + h * h * np.mean(np.sum(K * K, axis=1))
    assert X1.mean_sq_radius() - X.mean_sq_radius() == pytest.approx(expected, rel=1e-9)


def test_meanfield_zero_field_zero_noise_identity():
    spec = CutoffSpec(0.25, 10)
    Y = ParticleEnsemble(np.random.default_rng(1).normal(size=(10, 2)))
    Y1 = step_meanfield(Y, zero_history(spec), NoisePlan(0, 1e-3), 0, dw=np.zeros((10, 2)))
    np.testing.assert_array_equal(Y1.positions, Y.positions)


def test_meanfield_drift_against_quadrature():
    spec = CutoffSpec(0.25, 64)
    nu, chi = spec.nu, 4 * math.pi
    pts = np.array([[1.3, 0.0], [0.0, 2.5], [-3.0, 1.0], [0.4, -0.3]])
    rho = InitialDensitySpec.gaussian(1.0).pdf
    ref = []
    for p in pts:
        # (k * rho)(p) in polar coordinates centred on p
        comp = []
        for c in range(2):
            f = lambda th, r: float(PROFILE.s(nu * r)) / (2 * math.pi) * (math.cos(th), math.sin(th))[c] * float(  # noqa: E731
                rho(p - r * np.array([math.cos(th), math.sin(th)]))
            )
            comp.append(integrate.dblquad(f, 0, 12, 0, 2 * math.pi, epsabs=1e-10)[0])
        ref.append(comp)
    ref = -chi * np.array(ref)
    errs = []
    for n_g in (128, 256):
        f0 = init_density(InitialDensitySpec.gaussian(1.0), 8.0, n_g)
        hist = ForceHistory(f0.L, n_g, 1e-3, spec, chi)
        hist.append(f0)
        errs.append(np.max(np.abs(hist.drift(pts, 0.0) - ref)))
    assert errs[1] <= 1e-3
    assert errs[1] < errs[0] / 2.5  # second order in the cell size
    # Newton: radial, magnitude close to the mass within |p| over 2 pi |p|;
    # the cutoff removes part of the pull of the mass near p
    drift = hist.drift(pts, 0.0)
    for p, d in zip(pts, drift):
        r = np.hypot(*p)
        newton = chi * (1 - math.exp(-r * r / 2)) / (2 * math.pi * r)
        assert abs(p[0] * d[1] - p[1] * d[0]) <= 1e-3 * r * np.hypot(*d)
        assert np.dot(d, p) < 0
        if r > 2:
            assert np.hypot(*d) == pytest.approx(newton, rel=0.05)


def test_identical_drift_keeps_coupling_exact():
    spec = CutoffSpec(0.25, 50)
    noise = NoisePlan(5, 1e-3)
    X0 = sample_initial(InitialDensitySpec.gaussian(), 50, noise)
    state = CoupledState(X0, X0.copy())
    hist = zero_history(spec)
    for _ in range(20):
        state, _ = step_coupled(state, 0.0, spec, hist, noise)
    np.testing.assert_array_equal(state.X.positions, state.Y.positions)


def test_spawn_intermediate_rules(small_pde):
    hist = small_pde.history
    spec = hist.spec
    noise = NoisePlan(9, hist.dt)
    X0 = sample_initial(InitialDensitySpec.gaussian(), 64, noise)
    state = CoupledState(X0, X0.copy())
    spawn_intermediate(state, 0.0)
    with pytest.raises(ValueError):
        spawn_intermediate(state, 0.0)
    with pytest.raises(ValueError):
        spawn_intermediate(state, 0.5)
    for _ in range(10):
        state, _ = step_coupled(state, hist.chi, spec, hist, noise)
    # born at 0: identical to Y
    np.testing.assert_array_equal(state.Z[0][1].positions, state.Y.positions)
    spawn_intermediate(state, state.time)
    np.testing.assert_array_equal(state.Z[1][1].positions, state.X.positions)
    # two processes born from equal states stay equal
    twin = CoupledState(state.X, state.Y, [(state.time, state.X.copy()), (state.time + 1, state.X.copy())], state.step)
    for _ in range(5):
        twin, _ = step_coupled(twin, hist.chi, spec, hist, noise)
    np.testing.assert_array_equal(twin.Z[0][1].positions, twin.Z[1][1].positions)


def test_spawn_limit():
    spec = CutoffSpec(0.25, 4)
    state = CoupledState(ParticleEnsemble(np.zeros((4, 2))), ParticleEnsemble(np.zeros((4, 2))))
    state.Z = [(-float(k) - 1, state.X.copy()) for k in range(sde.MAX_LIVE_Z)]
    with pytest.raises(ValueError):
        spawn_intermediate(state, 0.0)
    del spec


def test_run_coupled_zero_horizon(small_pde):
    cfg = CoupledRunConfig(64, 4 * math.pi, 0.25, 0.0, seed=1)
    rec = run_coupled(cfg, small_pde.history)
    assert rec.sup_distance == 0.0 and rec.t.size == 1


def test_run_coupled_chi_zero_exact(small_pde):
    cfg = CoupledRunConfig(64, 0.0, 0.25, 0.05, seed=2)
    hist = small_pde.history
    zero = ForceHistory(hist.L, hist.n_g, hist.dt, hist.spec, 0.0)
    zero.fields, zero.masses, zero.centers_of_mass = hist.fields, hist.masses, hist.centers_of_mass
    rec = run_coupled(cfg, zero)
    assert np.all(rec.sup_dist == 0.0)


def test_run_coupled_record_properties(small_pde):
    cfg = CoupledRunConfig(64, 4 * math.pi, 0.25, 0.05, seed=3, replica=1, z_times=(0.0, 0.02, 0.05))
    rec = run_coupled(cfg, small_pde.history)
    assert not rec.failed
    assert np.all(np.diff(rec.running_sup) >= 0)
    assert rec.running_sup[-1] == rec.sup_dist.max() > 0
    assert rec.to_csv().splitlines()[0] == "t,sup_dist,mean_sq_radius,n_pairs_in_cutoff"
    assert len(rec.to_csv().splitlines()) == rec.t.size + 1
    g = rec.z_gaps
    assert g.shape == (3, 3)
    assert np.all(np.isnan(g[np.triu_indices(3, 1)]))
    np.testing.assert_array_equal(np.diag(g), 0.0)  # Z_{s,s} = X_s
    again = run_coupled(cfg, small_pde.history)
    assert again.to_csv() == rec.to_csv() and again.content_hash() == rec.content_hash()
    m = rec.manifest()
    assert m["schema_version"] == 1 and m["seed"] == 3 and len(m["content_hash"]) == 64


def test_run_coupled_weak_order_brownian(small_pde):
    hist = small_pde.history
    zero = ForceHistory(hist.L, hist.n_g, hist.dt, hist.spec, 0.0)
    zero.fields, zero.masses, zero.centers_of_mass = hist.fields, hist.masses, hist.centers_of_mass
    T = 0.05
    finals = []
    for r in range(8):
        rec = run_coupled(CoupledRunConfig(64, 0.0, 0.25, T, seed=10 + r, replica=r), zero)
        finals.append(rec.final_X)
    x = np.concatenate(finals)
    r2 = np.sum(x * x, axis=1)
    assert abs(r2.mean() - (2.0 + 4 * T)) <= 3 * r2.std() / math.sqrt(r2.size)


def test_non_finite_state_fails_replica(small_pde, monkeypatch):
    calls = {"n": 0}
    real = sde.n_body_forces_counted

    def flaky(pos, chi, spec, *a, **k):
        calls["n"] += 1
        out, c = real(pos, chi, spec, *a, **k)
        if calls["n"] == 5:
            out[0, 0] = np.inf
        return out, c

    monkeypatch.setattr(sde, "n_body_forces_counted", flaky)
    rec = run_coupled(CoupledRunConfig(64, 4 * math.pi, 0.25, 0.05, seed=4), small_pde.history)
    assert rec.failed and "non-finite" in rec.message
    assert rec.t.size == 5
    with pytest.raises(NonFiniteState):
        sde._advance(np.zeros((1, 2)), np.array([[np.nan, 0.0]]), 1e-3, np.zeros((1, 2)), 0.0)


def test_history_cadence_must_match(small_pde):
    with pytest.raises(ValueError):
        run_coupled(CoupledRunConfig(64, 4 * math.pi, 0.25, 0.05, h=5e-4), small_pde.history)
