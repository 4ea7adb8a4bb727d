"""Convergence diagnostics: coupling distances, Wasserstein-1, LoLN deviations, J-process, heat-kernel norms.

Note the ground metric for every Wasserstein computation here is the sup norm
``|x - y|_inf`` on the plane, not the Euclidean distance.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

from .kernel import (
    CutoffSpec,
    _nu,
    default_nu2,
    lipschitz_majorant,
    n_body_forces,
    n_body_lipschitz_all,
)
from .noise import STREAM_AUX, NoisePlan
from .pde import DensityField, _convolve, _kernel_hats, _offsets, force_at

W1_BUDGET = 4096


class BudgetExceeded(ValueError):
    """Combined support too large for the exact solver; subsample first."""


# ---------------------------------------------------------------------------
# coupling distance and tails


def sup_distance(X_series, Y_series) -> float:
    """``max_t max_i |X_t^i - Y_t^i|_inf`` for series shaped (steps, N, 2)."""
    X = np.asarray(X_series, dtype=float)
    Y = np.asarray(Y_series, dtype=float)
    if X.shape != Y.shape:
        raise ValueError(f"misaligned series: {X.shape} vs {Y.shape}")
    return float(np.max(np.abs(X - Y))) if X.size else 0.0


@dataclass(frozen=True)
class TailEstimate:
    threshold: float
    replicas: int
    exceedances: int
    estimate: float
    ci_low: float
    ci_high: float


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Score (Wilson) interval for a binomial proportion."""
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds are exactly 0 and 1 at the extremes; avoid rounding residue there
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


def tail_probability(sups, threshold: float) -> TailEstimate:
    sups = np.asarray(sups, dtype=float)
    if sups.size == 0:
        raise ValueError("no replicas")
    k = int(np.sum(sups >= threshold))
    lo, hi = wilson_interval(k, sups.size)
    return TailEstimate(threshold, int(sups.size), k, k / sups.size, lo, hi)


# ---------------------------------------------------------------------------
# Wasserstein-1 with sup-norm ground metric


def sup_norm_cost(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.max(np.abs(a[:, None, :] - b[None, :, :]), axis=-1)


def wasserstein1(mu, nu, mu_weights=None, nu_weights=None, budget: int = W1_BUDGET) -> float:
    """Exact ``W_1`` between two weighted point sets (weights default to uniform)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    n, m = len(mu), len(nu)
    if n + m > budget:
        raise BudgetExceeded(f"combined support {n + m} exceeds the exact-solver budget {budget}")
    a = np.full(n, 1.0 / n) if mu_weights is None else np.asarray(mu_weights, dtype=float)
    b = np.full(m, 1.0 / m) if nu_weights is None else np.asarray(nu_weights, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("weights must be non-negative")
    if not math.isclose(a.sum(), b.sum(), rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"unequal masses {a.sum():g} and {b.sum():g}")
    cost = sup_norm_cost(mu, nu)
    if n == m and np.allclose(a, a[0]) and np.allclose(b, a[0]):
        # uniform, equal size: an optimal plan is a permutation
        r, c = optimize.linear_sum_assignment(cost)
        return float(cost[r, c].sum() * a[0])
    return _transport_lp(cost, a, b)


def _transport_lp(cost, a, b) -> float:
    n, m = cost.shape
    rows = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    from scipy.sparse import coo_matrix, vstack

    A_mu = coo_matrix((np.ones(n * m), (rows, cols)), shape=(n, n * m))
    A_nu = coo_matrix((np.ones(n * m), (np.tile(np.arange(m), n), cols)), shape=(m, n * m))
    A = vstack([A_mu, A_nu]).tocsr()
    res = optimize.linprog(
        cost.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs"
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def sample_field(field_: DensityField, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` points from a gridded density: multinomial over cells, uniform inside."""
    p = np.clip(field_.rho, 0.0, None).ravel()
    p = p / p.sum()
    idx = rng.choice(p.size, size=m, p=p)
    ix, iy = np.unravel_index(idx, field_.rho.shape)
    u = rng.random((m, 2))
    h = field_.cell
    return np.stack([-field_.L + (ix + u[:, 0]) * h, -field_.L + (iy + u[:, 1]) * h], axis=1)


@dataclass(frozen=True)
class MarginalW1:
    values: np.ndarray
    m: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if self.values.size > 1 else 0.0

    @property
    def median(self) -> float:
        return float(np.median(self.values))


def marginal_w1(X, field_: DensityField, m: int, noise: NoisePlan, repeats: int = 1, step: int = 0) -> MarginalW1:
    """W1 between ``m`` subsampled particles and ``m`` draws from the gridded density."""
    X = np.asarray(X, dtype=float)
    if m > X.shape[0]:
        raise ValueError(f"cannot subsample {m} of {X.shape[0]} particles")
    if 2 * m > W1_BUDGET:
        raise BudgetExceeded(f"2m = {2 * m} exceeds the exact-solver budget {W1_BUDGET}")
    rng = noise.generator(step, STREAM_AUX)
    vals = []
    for _ in range(repeats):
        pick = rng.choice(X.shape[0], size=m, replace=False)
        ref = sample_field(field_, m, rng)
        vals.append(wasserstein1(X[pick], ref))
    return MarginalW1(np.array(vals), m)


# ---------------------------------------------------------------------------
# law of large numbers statistics


@functools.lru_cache(maxsize=16)
def _majorant_hat(n: int, h: float, nu: float, far_order: int = 4, near_order: int = 16):
    ox, oy = _offsets(n, h)
    out = np.zeros_like(ox)
    far = np.hypot(ox, oy) > 4.0 / nu + h
    for order, mask in ((far_order, far), (near_order, ~far)):
        g, w = np.polynomial.legendre.leggauss(order)
        cx, cy = ox[mask], oy[mask]
        acc = np.zeros(cx.size)
        for gi, wi in zip(g, w):
            for gj, wj in zip(g, w):
                pts = np.stack([cx + 0.5 * h * gi, cy + 0.5 * h * gj], axis=-1)
                acc += 0.25 * wi * wj * lipschitz_majorant(pts, nu)
        out[mask] = acc
    return _kernel_hats(n, out)


def majorant_convolution(field_: DensityField, nu: float) -> np.ndarray:
    """``(l^nu * rho)`` at cell centres, shape (n_g, n_g)."""
    (hat,) = _majorant_hat(field_.n_g, field_.cell, float(nu))
    (out,) = _convolve(field_.rho * field_.area, (hat,), field_.n_g)
    return out


@dataclass(frozen=True)
class LolnResult:
    k_stat: float
    l_stat: float
    l2_stat: float
    threshold: float

    @property
    def exceeds(self) -> bool:
        return self.k_stat >= self.threshold


def loln_statistic(Y, field_: DensityField, chi: float, spec: CutoffSpec, nu2: float | None = None) -> LolnResult:
    """``sup_i |K_i(Y) - Kbar_i(Y)|`` and the analogous deviations of ``|L|`` and ``|L_2|``.

    ``Kbar`` integrates against the full density, which includes particle ``i``'s
    own law; that differs from leaving ``i`` out by ``O(1/N)``.
    """
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    delta = 0.5 * (0.5 - spec.alpha)
    threshold = float(n) ** -(spec.alpha + delta)
    if n < 2:
        return LolnResult(0.0, 0.0, 0.0, threshold)
    nu2 = default_nu2(n) if nu2 is None else float(nu2)
    com = field_.center_of_mass()
    mass = field_.mass()
    K = n_body_forces(Y, chi, spec)
    Kbar = -chi * force_at(field_.kernel_force(spec), field_.L, Y, mass, com)
    k_stat = float(np.max(np.abs(K - Kbar)))
    stats = []
    for nu in (_nu(spec), nu2):
        L = n_body_lipschitz_all(Y, chi, nu)
        grid = majorant_convolution(field_, nu)
        Lbar = abs(chi) * _interp_scalar(grid, field_.L, Y, mass, nu)
        stats.append(float(np.max(np.abs(L - Lbar))))
    return LolnResult(k_stat, stats[0], stats[1], threshold)


def _interp_scalar(grid, L, x, mass, nu):
    two = np.stack([grid, grid])
    vals = force_at(two, L, x)[:, 0]
    outside = (np.abs(x[:, 0]) > L) | (np.abs(x[:, 1]) > L)
    if outside.any():
        vals[outside] = mass * lipschitz_majorant(x[outside], nu)
    return vals


def exceptional_set_frequencies(results, C: float = 1.0) -> dict[str, float]:
    """Empirical frequencies of the complements of the good sets B1 and B2."""
    results = list(results)
    if not results:
        raise ValueError("no results")
    b1 = np.array([r.k_stat <= r.threshold and r.l_stat <= C for r in results])
    b2 = b1 & np.array([r.l2_stat <= C for r in results])
    return {
        "not_B1": float(np.mean(~b1)),
        "not_B2": float(np.mean(~b2)),
        "K_exceeds": float(np.mean([r.exceeds for r in results])),
    }


# ---------------------------------------------------------------------------
# J-process


@dataclass(frozen=True)
class JSchedule:
    N: float
    alpha: float

    def __post_init__(self):
        if not self.N > 1:
            raise ValueError("N must exceed 1 so that log N > 0")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 1/2)")

    @property
    def delta(self) -> float:
        return 0.5 * (0.5 - self.alpha)

    @property
    def C_N(self) -> float:
        return 18.0 * math.log(self.N) ** 0.75

    def f_N(self, t):
        lg = math.log(self.N)
        return np.maximum(4.0 / (np.asarray(t, dtype=float) * lg + lg**-0.25), 1.0)

    def saturation_time(self) -> float:
        """Smallest ``t`` with ``f_N(t) = 1``."""
        lg = math.log(self.N)
        return max(0.0, (4.0 - lg**-0.25) / lg)


def j_process(z_times, z_gaps, schedule: JSchedule, T: float) -> np.ndarray:
    """``J_t`` on the recorded birth grid from gaps ``|Z_{s,s} - Z_{s,tau}|_inf``.

    ``z_gaps[k, l]`` is the gap at ``s = z_times[k]`` for the process born at
    ``tau = z_times[l]`` (NaN where ``tau > s``).
    """
    z_times = np.asarray(z_times, dtype=float)
    gaps = np.asarray(z_gaps, dtype=float)
    if gaps.shape != (z_times.size, z_times.size):
        raise ValueError("gap matrix does not match the time grid")
    N, a, d = schedule.N, schedule.alpha, schedule.delta
    inner = np.empty(z_times.size)
    for k, s in enumerate(z_times):
        taus = z_times[: k + 1]
        g = gaps[k, : k + 1]
        if np.isnan(g).any():
            raise ValueError(f"missing Z samples at s={s:g}")
        a_vals = N**a * schedule.f_N(s - taus) * g + N**-d
        # cap the exponent so min{1, .} stays finite
        expo = min(schedule.C_N * (T - s), 700.0)
        inner[k] = math.exp(expo) * a_vals.max()
    return np.minimum(1.0, np.maximum.accumulate(inner))


def j_initial(schedule: JSchedule, T: float) -> float:
    # same arithmetic as the t = 0 entry of j_process, so the two agree bitwise
    return min(1.0, math.exp(min(schedule.C_N * T, 700.0)) * schedule.N**-schedule.delta)


def geometric_grid(T: float, h: float, n_points: int = 16) -> tuple:
    """Up to ``n_points`` step-aligned times in ``[0, T]``, geometric towards ``T``."""
    if T <= 0:
        return (0.0,)
    lags = np.geomspace(h, T, n_points - 1)
    pts = np.concatenate([[0.0], T - lags[::-1], [T]])
    steps = np.unique(np.clip(np.round(pts / h), 0, round(T / h)).astype(int))
    return tuple(float(k * h) for k in steps)


# ---------------------------------------------------------------------------
# heat kernel G(t, x) = exp(-|x|^2 / (2t)) / (2 pi t)


def heat_kernel(t, x):
    x = np.asarray(x, dtype=float)
    r2 = np.einsum("...i,...i->...", x, x)
    return np.exp(-r2 / (2.0 * t)) / (2.0 * math.pi * t)


def heat_kernel_norms(t: float, p: float, method: str = "closed") -> tuple[float, float]:
    """``(||G(t)||_p, ||grad G(t)||_p)``; ``method='quad'`` integrates radially."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if t <= 0:
        raise ValueError("t must be positive")
    if method == "closed":
        return _heat_closed(t, p)
    if method == "quad":
        return _heat_quad(t, p)
    raise ValueError(f"unknown method {method!r}")


def _heat_closed(t, p):
    if math.isinf(p):
        return 1.0 / (2 * math.pi * t), math.exp(-0.5) / (2 * math.pi * t**1.5)
    g = (2 * math.pi * t) ** (1.0 / p - 1.0) * p ** (-1.0 / p)
    log_grad = (
        math.log(math.pi)
        - p * math.log(2 * math.pi * t * t)
        + (p / 2 + 1) * math.log(2 * t / p)
        + special.gammaln(p / 2 + 1)
    )
    return g, math.exp(log_grad / p)


def _heat_quad(t, p):
    s = math.sqrt(t)
    g_prof = lambda r: math.exp(-r * r / (2 * t)) / (2 * math.pi * t)  # noqa: E731
    d_prof = lambda r: r / (2 * math.pi * t * t) * math.exp(-r * r / (2 * t))  # noqa: E731
    if math.isinf(p):
        best = optimize.minimize_scalar(lambda r: -d_prof(r), bounds=(0, 10 * s), method="bounded")
        return g_prof(0.0), d_prof(best.x)
    opts = dict(epsabs=0, epsrel=1e-13, limit=200)
    ig = integrate.quad(lambda r: g_prof(r) ** p * 2 * math.pi * r, 0, 40 * s, **opts)[0]
    idg = integrate.quad(lambda r: d_prof(r) ** p * 2 * math.pi * r, 0, 40 * s, points=[s], **opts)[0]
    return ig ** (1 / p), idg ** (1 / p)


def shifted_kernel_norm(t: float, d: float, p: float = 1.0) -> float:
    """``||G(t, . - x0) - G(t, . - y0)||_p`` for ``|x0 - y0| = d``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if d == 0:
        return 0.0
    if p == 1:
        # total variation of two equal-covariance Gaussians
        return 2.0 * math.erf(d / (2.0 * math.sqrt(2.0 * t)))
    s = math.sqrt(t)
    half = d / 2.0
    diff = lambda y, x: abs(  # noqa: E731
        math.exp(-((x - half) ** 2 + y * y) / (2 * t)) - math.exp(-((x + half) ** 2 + y * y) / (2 * t))
    ) / (2 * math.pi * t)
    R = half + 12 * s
    if math.isinf(p):
        xs = np.linspace(-R, R, 4001)
        pts = np.stack([xs, np.zeros_like(xs)], axis=-1)
        return float(np.max(np.abs(heat_kernel(t, pts - [half, 0]) - heat_kernel(t, pts + [half, 0]))))
    # integrand is odd in x and even in y: integrate the quarter x>0, y>0
    val = integrate.dblquad(
        lambda y, x: diff(y, x) ** p, 0, R, 0, 12 * s, epsabs=0, epsrel=1e-10
    )[0]
    return (4.0 * val) ** (1.0 / p)
