"""Mollified Coulomb interaction in the plane.

The potential ``phi^1`` equals ``-log|x| / (2 pi)`` outside radius 2 and is flat
inside radius 1.  In between, the radial force magnitude is blended by a
quintic smoothstep ``s`` so that

    k^nu(x) = s(nu |x|) x / (2 pi |x|^2),

which is exactly Coulomb for ``|x| >= 2/nu`` and exactly zero for
``|x| <= 1/nu``.  Because ``s`` is a polynomial, no lookup table is needed.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from numpy.polynomial import Polynomial

TWO_PI = 2.0 * math.pi

__all__ = [
    "CutoffSpec",
    "RadialProfile",
    "PROFILE",
    "potential",
    "force",
    "lipschitz_majorant",
    "n_body_force",
    "n_body_forces",
    "n_body_forces_counted",
    "n_body_lipschitz",
    "n_body_lipschitz_all",
    "split_force",
    "default_nu2",
    "measure_hessian_constant",
    "force_jacobian",
    "radial_table",
    "pairs_in_cutoff",
]


class RadialProfile:
    """Quintic smoothstep ``s(r)`` switching from 0 at ``r = 1`` to 1 at ``r = 2``."""

    def __init__(self) -> None:
        w = Polynomial([-1.0, 1.0])  # w = r - 1
        self.poly = 10 * w**3 - 15 * w**4 + 6 * w**5
        self.dpoly = self.poly.deriv()
        # s(u)/u = q(u) + c/u  =>  antiderivative  Q(u) + c log u
        q, rem = divmod(self.poly, Polynomial([0.0, 1.0]))
        self._log_coef = float(rem.coef[0]) if rem.coef.size else 0.0
        self._q_int = q.integ()
        # inside value of psi so that psi(r) = -log(r)/(2 pi) for r >= 2
        self.inner_constant = self.psi(np.array([1.0]))[0]

    def s(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= 1.0, 0.0, np.where(r >= 2.0, 1.0, self.poly(np.clip(r, 1.0, 2.0))))

    def ds(self, r):
        r = np.asarray(r, dtype=float)
        inside = (r > 1.0) & (r < 2.0)
        return np.where(inside, self.dpoly(np.clip(r, 1.0, 2.0)), 0.0)

    def s_over_r_integral(self, a, b):
        """``int_a^b s(u)/u du`` for ``1 <= a, b <= 2``."""
        anti = lambda u: self._q_int(u) + self._log_coef * np.log(u)  # noqa: E731
        return anti(b) - anti(a)

    def psi(self, r):
        """Radial potential of unit cutoff, continuous, exact log outside r = 2."""
        r = np.asarray(r, dtype=float)
        outer = -np.log(np.maximum(r, 2.0)) / TWO_PI
        rc = np.clip(r, 1.0, 2.0)
        mid = -math.log(2.0) / TWO_PI + self.s_over_r_integral(rc, 2.0) / TWO_PI
        return np.where(r >= 2.0, outer, mid)


PROFILE = RadialProfile()


@functools.lru_cache(maxsize=None)
def measure_hessian_constant(n_radii: int = 4001, n_angles: int = 361) -> float:
    """Smallest C with ``|d_i k_j(x)| <= C / (pi |x|^2)`` for all ``x`` (scale free).

    Never below 1, which is the constant of the pure Coulomb region.
    """
    r = np.linspace(1.0, 2.0, n_radii)[:, None]
    th = np.linspace(0.0, math.pi, n_angles)[None, :]
    g = PROFILE.s(r) / (TWO_PI * r)
    dg = PROFILE.ds(r) / (TWO_PI * r) - PROFILE.s(r) / (TWO_PI * r**2)
    c, sn = np.cos(th), np.sin(th)
    d11 = dg * c * c + (g / r) * sn * sn
    d22 = dg * sn * sn + (g / r) * c * c
    d12 = (dg - g / r) * c * sn
    worst = np.max(np.maximum(np.abs(d11), np.maximum(np.abs(d22), np.abs(d12))) * math.pi * r**2)
    return float(max(1.0, worst))


@dataclass(frozen=True)
class CutoffSpec:
    """Regularisation parameters. ``nu`` defaults to ``n_particles ** alpha``."""

    alpha: float
    n_particles: int
    nu: float | None = None
    hessian_slack: float = field(default_factory=measure_hessian_constant)

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 1/2), got {self.alpha}")
        if int(self.n_particles) < 1:
            raise ValueError(f"n_particles must be positive, got {self.n_particles}")
        if self.nu is None:
            object.__setattr__(self, "nu", float(self.n_particles) ** self.alpha)
        if not self.nu > 0.0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.hessian_slack < 1.0:
            raise ValueError("hessian_slack must be >= 1")

    @property
    def inner_radius(self) -> float:
        return 1.0 / self.nu

    @property
    def outer_radius(self) -> float:
        return 2.0 / self.nu

    def with_nu(self, nu: float) -> "CutoffSpec":
        return CutoffSpec(self.alpha, self.n_particles, nu, self.hessian_slack)


def _nu(spec_or_nu) -> float:
    return spec_or_nu.nu if isinstance(spec_or_nu, CutoffSpec) else float(spec_or_nu)


def potential(x, spec):
    """``phi^nu(x) = phi^1(nu x)``; accepts points of shape (..., 2)."""
    nu = _nu(spec)
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    out = PROFILE.psi(nu * r)
    return out if out.ndim else float(out)


def force(x, spec):
    """``k^nu(x) = -grad phi^nu(x)``; accepts points of shape (..., 2)."""
    nu = _nu(spec)
    x = np.asarray(x, dtype=float)
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    s = PROFILE.s(nu * np.sqrt(r2))
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(s > 0.0, s / (TWO_PI * np.where(r2 > 0, r2, 1.0)), 0.0)
    return w[..., None] * x


def force_jacobian(x, spec):
    """Jacobian ``d k_j / d x_i`` of the cutoff force, shape (..., 2, 2)."""
    nu = _nu(spec)
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    safe = np.where(r > 0, r, 1.0)
    g = PROFILE.s(nu * r) / (TWO_PI * safe)
    dg = nu * PROFILE.ds(nu * r) / (TWO_PI * safe) - PROFILE.s(nu * r) / (TWO_PI * safe**2)
    e = x / safe[..., None]
    outer = e[..., :, None] * e[..., None, :]
    eye = np.eye(2)
    jac = dg[..., None, None] * outer + (g / safe)[..., None, None] * (eye - outer)
    return np.where((r > 0)[..., None, None], jac, 0.0)


def lipschitz_majorant(y, spec):
    """Two-branch local Lipschitz majorant ``l^nu(y)``."""
    nu = _nu(spec)
    y = np.asarray(y, dtype=float)
    r2 = y[..., 0] ** 2 + y[..., 1] ** 2
    with np.errstate(divide="ignore"):
        out = np.where(r2 >= (4.0 / nu) ** 2, 16.0 / np.where(r2 > 0, r2, 1.0), nu * nu)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# N-body sums.  The serial kernels visit each unordered pair once, in a fixed
# (i ascending, j ascending) order, so results are reproducible bit for bit.


@nb.njit(nogil=True, cache=True)
def _pair_weight(r2, nu, r_in2, r_out2):
    if r2 >= r_out2:
        return 1.0 / r2
    if r2 <= r_in2:
        return 0.0
    t = math.sqrt(r2) * nu - 1.0
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t)) / r2


@nb.njit(nogil=True, cache=True)
def _forces_halfpair(pos, nu, scale, out):
    n = pos.shape[0]
    r_in2 = 1.0 / (nu * nu)
    r_out2 = 4.0 / (nu * nu)
    close = 0
    for i in range(n):
        out[i, 0] = 0.0
        out[i, 1] = 0.0
    for i in range(n):
        xi = pos[i, 0]
        yi = pos[i, 1]
        fx = 0.0
        fy = 0.0
        for j in range(i + 1, n):
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            r2 = dx * dx + dy * dy
            if r2 >= r_out2:
                w = 1.0 / r2
            else:
                close += 1
                if r2 <= r_in2:
                    continue
                t = math.sqrt(r2) * nu - 1.0
                w = t * t * t * (10.0 + t * (-15.0 + 6.0 * t)) / r2
            fx += w * dx
            fy += w * dy
            out[j, 0] -= w * dx
            out[j, 1] -= w * dy
        out[i, 0] += fx
        out[i, 1] += fy
    for i in range(n):
        out[i, 0] *= scale
        out[i, 1] *= scale
    return close


@nb.njit(nogil=True, parallel=True, cache=True)
def _forces_rows(pos, nu, scale, out):
    n = pos.shape[0]
    r_in2 = 1.0 / (nu * nu)
    r_out2 = 4.0 / (nu * nu)
    for i in nb.prange(n):
        xi = pos[i, 0]
        yi = pos[i, 1]
        fx = 0.0
        fy = 0.0
        for j in range(n):
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            r2 = dx * dx + dy * dy
            if r2 <= r_in2:
                continue
            w = _pair_weight(r2, nu, r_in2, r_out2)
            fx += w * dx
            fy += w * dy
        out[i, 0] = scale * fx
        out[i, 1] = scale * fy


@nb.njit(nogil=True, cache=True)
def _split_halfpair(pos, nu, nu2, scale, out1, out2):
    n = pos.shape[0]
    a_in2, a_out2 = 1.0 / (nu * nu), 4.0 / (nu * nu)
    b_in2, b_out2 = 1.0 / (nu2 * nu2), 4.0 / (nu2 * nu2)
    for i in range(n):
        out1[i, 0] = 0.0
        out1[i, 1] = 0.0
        out2[i, 0] = 0.0
        out2[i, 1] = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            r2 = dx * dx + dy * dy
            w = _pair_weight(r2, nu, a_in2, a_out2)
            w2 = _pair_weight(r2, nu2, b_in2, b_out2)
            w1 = w - w2
            out1[i, 0] += w1 * dx
            out1[i, 1] += w1 * dy
            out1[j, 0] -= w1 * dx
            out1[j, 1] -= w1 * dy
            out2[i, 0] += w2 * dx
            out2[i, 1] += w2 * dy
            out2[j, 0] -= w2 * dx
            out2[j, 1] -= w2 * dy
    for i in range(n):
        for c in range(2):
            out1[i, c] *= scale
            out2[i, c] *= scale


@nb.njit(nogil=True, cache=True)
def _lipschitz_halfpair(pos, nu, out):
    n = pos.shape[0]
    far2 = 16.0 / (nu * nu)
    inner = nu * nu
    for i in range(n):
        out[i] = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            r2 = dx * dx + dy * dy
            w = 16.0 / r2 if r2 >= far2 else inner
            acc += w
            out[j] += w
        out[i] += acc


def _as_positions(positions) -> np.ndarray:
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError(f"positions must have shape (N, 2), got {pos.shape}")
    return pos


def n_body_forces(positions, chi: float, spec, out=None, parallel: bool = False) -> np.ndarray:
    """All components ``K_i = -(chi/N) sum_{j != i} k^nu(x_i - x_j)`` at once.

    The default serial pass visits each pair once.  ``parallel=True`` splits
    rows over numba threads; each row is summed in ascending ``j`` so that
    variant is also independent of the thread count (but not bitwise equal to
    the serial one).
    """
    return n_body_forces_counted(positions, chi, spec, out, parallel)[0]


def n_body_forces_counted(positions, chi: float, spec, out=None, parallel: bool = False):
    """Like :func:`n_body_forces`, also returning the number of pairs closer than ``2/nu``.

    The count is only produced by the serial pass (``-1`` otherwise).
    """
    pos = _as_positions(positions)
    if out is None:
        out = np.empty_like(pos)
    n = pos.shape[0]
    scale = -chi / (n * TWO_PI)
    if parallel:
        _forces_rows(pos, _nu(spec), scale, out)
        return out, -1
    close = _forces_halfpair(pos, _nu(spec), scale, out)
    return out, int(close)


def n_body_force(positions, i: int, chi: float, spec) -> np.ndarray:
    """Single component ``K_i``; ``i`` is zero-based."""
    pos = _as_positions(positions)
    n = pos.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"particle index {i} out of range for N={n}")
    diff = pos[i] - np.delete(pos, i, axis=0)
    return -chi / n * force(diff, spec).sum(axis=0)


def n_body_lipschitz_all(positions, chi: float, spec) -> np.ndarray:
    """``|L_i| = (chi/N) sum_{j != i} l^nu(y_i - y_j)`` for every ``i``."""
    pos = _as_positions(positions)
    out = np.empty(pos.shape[0])
    _lipschitz_halfpair(pos, _nu(spec), out)
    return abs(chi) / pos.shape[0] * out


def n_body_lipschitz(positions, i: int, chi: float, spec) -> float:
    pos = _as_positions(positions)
    n = pos.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"particle index {i} out of range for N={n}")
    diff = pos[i] - np.delete(pos, i, axis=0)
    return float(abs(chi) / n * np.sum(lipschitz_majorant(diff, spec)))


def default_nu2(n_particles: int) -> float:
    """Wide cutoff rate for the force split: radius ``(log N)^{-3/2}``."""
    return math.log(n_particles) ** 1.5


def split_force(positions, chi: float, spec, nu2: float):
    """Return ``(K1, K2)`` with ``K2`` built from ``k^{nu2}`` and ``K1 = K - K2``."""
    nu = _nu(spec)
    if not nu2 < nu:
        raise ValueError(f"nu2 must be smaller than nu (got nu2={nu2}, nu={nu})")
    pos = _as_positions(positions)
    k1 = np.empty_like(pos)
    k2 = np.empty_like(pos)
    _split_halfpair(pos, nu, float(nu2), -chi / (pos.shape[0] * TWO_PI), k1, k2)
    return k1, k2


def split_kernel_l1(nu: float, nu2: float) -> float:
    """Closed form of ``int |k^nu - k^{nu2}| dx`` for ``nu2 < nu``."""
    # int_0^2 (1 - s(u)) du = 1 + 1/2 by the symmetry of the smoothstep
    return 1.5 * (1.0 / nu2 - 1.0 / nu)


def pairs_in_cutoff(positions, spec) -> int:
    """Number of unordered pairs closer than the outer cutoff radius ``2/nu``."""
    from scipy.spatial import cKDTree

    pos = _as_positions(positions)
    return int(cKDTree(pos).count_neighbors(cKDTree(pos), 2.0 / _nu(spec)) - pos.shape[0]) // 2


def radial_table(spec, radii=None) -> dict[str, np.ndarray]:
    """Columns r, s, phi, |k|, measured_hessian_norm on a radial grid."""
    nu = _nu(spec)
    if radii is None:
        radii = np.linspace(0.0, 3.0 / nu, 301)
    r = np.asarray(radii, dtype=float)
    pts = np.stack([r, np.zeros_like(r)], axis=-1)
    # entrywise worst case over directions
    th = np.linspace(0.0, math.pi, 181)
    rot = np.stack([np.cos(th), np.sin(th)], axis=-1)
    worst = np.zeros_like(r)
    for e in rot:
        j = force_jacobian(r[:, None] * e[None, :], nu)
        worst = np.maximum(worst, np.abs(j).reshape(r.size, 4).max(axis=1))
    return {
        "r": r,
        "s": PROFILE.s(nu * r),
        "phi": PROFILE.psi(nu * r),
        "|k|": np.hypot(*force(pts, nu).T),
        "measured_hessian_norm": worst * math.pi * r**2,
    }
