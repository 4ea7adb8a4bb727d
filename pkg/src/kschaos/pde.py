"""Regularised Keller-Segel solver on a truncated square.

Cell-averaged density on ``[-L, L]^2`` with ``n_g`` cells per side.  One step is
Strang split: half advection, exact heat flow, half advection.  Advection is a
flux-form MUSCL scheme driven by the drift ``-chi (k^nu * rho)``; the heat flow
uses the cosine basis (zero-flux walls), so both parts conserve mass to
round-off.

The interaction field ``k^nu * rho`` is a zero-padded FFT convolution against
cell averages of ``k^nu``.  Cells well outside the cutoff use the closed-form
average of the Coulomb field; cells touching the cutoff disc are integrated by
Gauss-Legendre quadrature.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sfft

from .densities import InitialDensitySpec
from .kernel import TWO_PI, CutoffSpec, _nu, force

__all__ = [
    "DensityField",
    "EnergyReport",
    "CFLViolation",
    "DomainTooSmall",
    "init_density",
    "convolve_force",
    "step_density",
    "energy_report",
    "ForceHistory",
    "force_at",
    "monopole_force",
    "solve_pde",
    "PdeRun",
    "write_snapshot",
    "read_snapshot",
]

EDGE_FRACTION = 0.05
EDGE_MASS_LIMIT = 1e-4
CFL = 0.4


class CFLViolation(ValueError):
    pass


class DomainTooSmall(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DensityField:
    L: float
    n_g: int
    rho: np.ndarray
    t: float = 0.0
    clipped_mass: float = 0.0
    renormalization: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def cell(self) -> float:
        return 2.0 * self.L / self.n_g

    @property
    def area(self) -> float:
        return self.cell**2

    @property
    def centers(self) -> np.ndarray:
        return -self.L + (np.arange(self.n_g) + 0.5) * self.cell

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.n_g + 1)

    def mass(self) -> float:
        return float(self.rho.sum() * self.area)

    def center_of_mass(self) -> np.ndarray:
        c = self.centers
        m = self.rho.sum()
        return np.array([(self.rho.sum(axis=1) * c).sum(), (self.rho.sum(axis=0) * c).sum()]) / m

    def edge_mass_fraction(self) -> float:
        k = max(1, int(math.ceil(EDGE_FRACTION * self.n_g)))
        inner = self.rho[k:-k, k:-k].sum()
        total = self.rho.sum()
        return float((total - inner) / total) if total > 0 else 0.0

    def sup_norm(self) -> float:
        return float(self.rho.max())

    def kernel_force(self, spec) -> np.ndarray:
        """Cached ``k^nu * rho`` at cell centres, shape (2, n_g, n_g)."""
        key = ("k", _nu(spec))
        if key not in self._cache:
            self._cache[key] = convolve_force(self, spec)
        return self._cache[key]

    def with_rho(self, rho, t, clipped_mass=None) -> "DensityField":
        return replace(
            self,
            rho=rho,
            t=t,
            clipped_mass=self.clipped_mass if clipped_mass is None else clipped_mass,
            _cache={},
        )


@dataclass(frozen=True)
class EnergyReport:
    time: float
    mass: float
    second_moment: float
    entropy: float
    interaction: float
    free_energy: float
    sup_norm: float

    COLUMNS = ("time", "mass", "second_moment", "entropy", "interaction", "free_energy", "sup_norm")

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in self.COLUMNS)


# ---------------------------------------------------------------------------
# construction


def init_density(spec: InitialDensitySpec, L: float, n_g: int) -> DensityField:
    edges = np.linspace(-L, L, n_g + 1)
    rho = spec.cell_averages(edges)
    area = (2.0 * L / n_g) ** 2
    mass = rho.sum() * area
    if not abs(mass - 1.0) <= 1e-3:
        raise DomainTooSmall(
            f"only {mass:.6f} of the initial mass fits in [-{L}, {L}]^2; "
            f"try L >= {_suggest_L(spec):.3g}"
        )
    field_ = DensityField(L, n_g, rho / mass, renormalization=1.0 / mass)
    if field_.edge_mass_fraction() >= EDGE_MASS_LIMIT:
        raise DomainTooSmall(
            f"edge mass fraction {field_.edge_mass_fraction():.2e} >= {EDGE_MASS_LIMIT:g}; "
            f"try L >= {_suggest_L(spec):.3g}"
        )
    return field_


def _suggest_L(spec: InitialDensitySpec) -> float:
    m, v, _ = spec._components()
    spread = spec.radius if spec.kind == "disc" else 6.0 * math.sqrt(max(v))
    return 1.2 * (float(np.abs(m).max()) + spread)


# ---------------------------------------------------------------------------
# interaction field


def _coulomb_x_primitive(x, y):
    """``G(x, y) = int log(x^2 + y^2) dy``."""
    r2 = x * x + y * y
    with np.errstate(divide="ignore", invalid="ignore"):
        at = np.where(x == 0.0, 0.0, x * np.arctan(y / np.where(x == 0.0, 1.0, x)))
        lg = np.where(r2 > 0.0, y * np.log(np.where(r2 > 0.0, r2, 1.0)), 0.0)
    return lg - 2.0 * y + 2.0 * at


def _coulomb_cell_average(cx, cy, h):
    """Average of ``x / (2 pi |x|^2)`` (x component) over the square of side ``h`` at (cx, cy)."""
    a, b = cx - h / 2, cx + h / 2
    c, d = cy - h / 2, cy + h / 2
    g = (
        _coulomb_x_primitive(b, d)
        - _coulomb_x_primitive(b, c)
        - _coulomb_x_primitive(a, d)
        + _coulomb_x_primitive(a, c)
    )
    return g / (4.0 * math.pi * h * h)


def _log_primitive(x, y):
    """``F(x, y) = int int log(x^2 + y^2) dx dy``."""
    r2 = x * x + y * y
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(r2 > 0, x * y * (np.log(np.where(r2 > 0, r2, 1.0)) - 3.0), 0.0)
        ax = np.where(x == 0.0, 0.0, x * x * np.arctan(y / np.where(x == 0.0, 1.0, x)))
        ay = np.where(y == 0.0, 0.0, y * y * np.arctan(x / np.where(y == 0.0, 1.0, y)))
    return lg + ax + ay


def log_kernel_cell_average(cx, cy, h):
    """Average of ``phi(x) = -log|x| / (2 pi)`` over the square of side ``h`` at (cx, cy)."""
    a, b = cx - h / 2, cx + h / 2
    c, d = cy - h / 2, cy + h / 2
    f = _log_primitive(b, d) - _log_primitive(b, c) - _log_primitive(a, d) + _log_primitive(a, c)
    return -f / (4.0 * math.pi * h * h)


def _offsets(n, h):
    m = np.arange(-(n - 1), n) * h
    return np.meshgrid(m, m, indexing="ij")


@functools.lru_cache(maxsize=16)
def _force_kernel_hat(n: int, h: float, nu: float, quad_order: int = 24):
    ox, oy = _offsets(n, h)
    kx = _coulomb_cell_average(ox, oy, h)
    ky = _coulomb_cell_average(oy, ox, h)
    # cells within reach of the cutoff annulus: replace by quadrature of k^nu
    reach = 2.0 / nu + h * math.sqrt(2.0) / 2.0
    near = np.hypot(ox, oy) <= reach
    g, w = np.polynomial.legendre.leggauss(quad_order)
    sub = 0.5 * h * g
    ww = np.outer(w, w).ravel() / 4.0
    qx, qy = np.meshgrid(sub, sub, indexing="ij")
    q = np.stack([qx.ravel(), qy.ravel()], axis=-1)
    for ix, iy in zip(*np.nonzero(near)):
        pts = q + np.array([ox[ix, iy], oy[ix, iy]])
        vals = force(pts, nu)
        kx[ix, iy] = ww @ vals[:, 0]
        ky[ix, iy] = ww @ vals[:, 1]
    return _kernel_hats(n, kx, ky)


@functools.lru_cache(maxsize=8)
def _log_kernel_hat(n: int, h: float):
    ox, oy = _offsets(n, h)
    return _kernel_hats(n, log_kernel_cell_average(ox, oy, h))


def _kernel_hats(n, *kernels):
    """Place offset kernels (2n-1)^2 in wrap-around order on a 2n grid and transform."""
    out = []
    for k in kernels:
        wrapped = np.zeros((2 * n, 2 * n))
        # offsets 0..n-1 go to 0..n-1, offsets -(n-1)..-1 go to n+1..2n-1
        wrapped[:n, :n] = k[n - 1 :, n - 1 :]
        wrapped[:n, n + 1 :] = k[n - 1 :, : n - 1]
        wrapped[n + 1 :, :n] = k[: n - 1, n - 1 :]
        wrapped[n + 1 :, n + 1 :] = k[: n - 1, : n - 1]
        out.append(sfft.rfft2(wrapped))
    return tuple(out)


def _convolve(rho, hats, n):
    rho_hat = sfft.rfft2(rho, s=(2 * n, 2 * n))
    return [sfft.irfft2(rho_hat * kh, s=(2 * n, 2 * n))[:n, :n] for kh in hats]


def convolve_force(field_: DensityField, spec) -> np.ndarray:
    """``(k^nu * rho)`` at cell centres as an array (2, n_g, n_g).

    The drift felt by a mean-field particle is ``-chi`` times this.
    """
    n, h = field_.n_g, field_.cell
    hats = _force_kernel_hat(n, h, _nu(spec))
    fx, fy = _convolve(field_.rho * field_.area, hats, n)
    return np.stack([fx, fy])


def monopole_force(x, mass=1.0, center=(0.0, 0.0)):
    """Far-field ``k * rho ~ mass (x - c) / (2 pi |x - c|^2)``."""
    d = np.asarray(x, dtype=float) - np.asarray(center, dtype=float)
    r2 = np.einsum("...i,...i->...", d, d)
    return mass * d / (TWO_PI * r2[..., None])


# ---------------------------------------------------------------------------
# stepping


def _mc_slope(q, axis):
    """Monotonised-central limited slopes along ``axis`` (zero at the walls)."""
    d = np.diff(q, axis=axis)
    pad = [(0, 0), (0, 0)]
    pad[axis] = (1, 1)
    d = np.pad(d, pad)
    sl = [slice(None)] * 2
    sr = [slice(None)] * 2
    sl[axis] = slice(None, -1)
    sr[axis] = slice(1, None)
    dl, dr = d[tuple(sl)], d[tuple(sr)]
    c = 0.5 * (dl + dr)
    lim = np.minimum(np.minimum(2.0 * np.abs(dl), 2.0 * np.abs(dr)), np.abs(c))
    return np.where(dl * dr > 0.0, np.sign(c) * lim, 0.0)


def _face_flux(rho, vel, axis):
    """Upwind MUSCL fluxes through interior faces normal to ``axis``."""
    slope = _mc_slope(rho, axis)
    lo = [slice(None)] * 2
    hi = [slice(None)] * 2
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    lo, hi = tuple(lo), tuple(hi)
    left = rho[lo] + 0.5 * slope[lo]
    right = rho[hi] - 0.5 * slope[hi]
    vf = 0.5 * (vel[lo] + vel[hi])
    return np.where(vf > 0.0, vf * left, vf * right)


def _advection_rate(rho, vx, vy, h):
    fx = _face_flux(rho, vx, 0)
    fy = _face_flux(rho, vy, 1)
    div = np.zeros_like(rho)
    div[:-1, :] += fx
    div[1:, :] -= fx
    div[:, :-1] += fy
    div[:, 1:] -= fy
    return -div / h


def _velocity(rho, field_, chi, spec):
    hats = _force_kernel_hat(field_.n_g, field_.cell, _nu(spec))
    fx, fy = _convolve(rho * field_.area, hats, field_.n_g)
    return -chi * fx, -chi * fy


def max_speed(vx, vy) -> float:
    return float(np.max(np.abs(vx) + np.abs(vy)))


def _advect(rho, field_, chi, spec, dt, v0=None):
    """SSP-RK2 over ``dt``, sub-cycled so every stage obeys the CFL bound.

    ``v0`` optionally supplies the velocity of the incoming ``rho``.
    """
    h = field_.cell
    remaining = dt
    while remaining > 0.0:
        if v0 is not None:
            (vx, vy), v0 = v0, None
        else:
            vx, vy = _velocity(rho, field_, chi, spec)
        vmax = max_speed(vx, vy)
        sub = remaining if vmax == 0.0 else min(remaining, CFL * h / vmax)
        r1 = rho + sub * _advection_rate(rho, vx, vy, h)
        vx1, vy1 = _velocity(r1, field_, chi, spec)
        rho = 0.5 * rho + 0.5 * (r1 + sub * _advection_rate(r1, vx1, vy1, h))
        remaining -= sub
        if remaining < 1e-15 * dt:
            break
    return rho


@functools.lru_cache(maxsize=16)
def _heat_multiplier(n: int, L: float, dt: float):
    k = np.arange(n) * math.pi / (2.0 * L)
    lam = np.exp(-(k**2) * dt)
    return lam[:, None] * lam[None, :]


def _diffuse(rho, field_, dt):
    coef = sfft.dctn(rho, type=2, norm="ortho")
    coef *= _heat_multiplier(field_.n_g, field_.L, dt)
    return sfft.idctn(coef, type=2, norm="ortho")


def _clip(rho, area):
    neg = rho < 0.0
    if not neg.any():
        return rho, 0.0
    clipped = float(-rho[neg].sum() * area)
    total = rho.sum()
    out = np.where(neg, 0.0, rho)
    # re-spread so the total matches the pre-clip total
    out *= total / out.sum()
    return out, clipped


def cfl_limit(field_: DensityField, chi: float, spec) -> float:
    if chi == 0.0:
        return math.inf
    vmax = abs(chi) * max_speed(*field_.kernel_force(spec))
    return math.inf if vmax == 0.0 else CFL * field_.cell / vmax


def step_density(field_: DensityField, chi: float, spec, dt: float, check_cfl: bool = True):
    """One Strang step of length ``dt``; rejects ``dt`` above the CFL bound."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0.0:
        return field_
    if check_cfl:
        lim = cfl_limit(field_, chi, spec)
        if dt > lim:
            raise CFLViolation(
                f"dt={dt:g} exceeds CFL bound {lim:g} (cell {field_.cell:g}, "
                f"max |v| {CFL * field_.cell / lim:g})"
            )
    if chi == 0.0:
        rho = _diffuse(field_.rho, field_, dt)
    else:
        kf = field_.kernel_force(spec)
        rho = _advect(field_.rho, field_, chi, spec, 0.5 * dt, v0=(-chi * kf[0], -chi * kf[1]))
        rho = _diffuse(rho, field_, dt)
        rho = _advect(rho, field_, chi, spec, 0.5 * dt)
    # negatives from the heat multiplier are clipped and the mass re-spread
    clipped = 0.0
    if rho.min() < 0.0:
        rho, clipped = _clip(rho, field_.area)
    return field_.with_rho(rho, field_.t + dt, field_.clipped_mass + clipped)


# ---------------------------------------------------------------------------
# functionals


def second_moment(field_: DensityField) -> float:
    c = field_.centers
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    # midpoint sum over cell averages overshoots by cell^2/6 per unit mass
    raw = float((field_.rho * r2).sum() * field_.area)
    return raw - field_.cell**2 / 6.0 * field_.mass()


def entropy(field_: DensityField) -> float:
    rho = field_.rho
    pos = rho >= 1e-30
    return float(np.sum(rho[pos] * np.log(rho[pos])) * field_.area)


def interaction_energy(field_: DensityField, chi: float) -> float:
    """``-(chi/2) int rho (phi * rho)`` with the unregularised log kernel."""
    n = field_.n_g
    (hat,) = _log_kernel_hat(n, field_.cell)
    (pot,) = _convolve(field_.rho * field_.area, (hat,), n)
    return float(-0.5 * chi * np.sum(field_.rho * pot) * field_.area)


def energy_report(field_: DensityField, chi: float) -> EnergyReport:
    ent = entropy(field_)
    inter = interaction_energy(field_, chi)
    return EnergyReport(
        time=field_.t,
        mass=field_.mass(),
        second_moment=second_moment(field_),
        entropy=ent,
        interaction=inter,
        free_energy=ent + inter,
        sup_norm=field_.sup_norm(),
    )


# ---------------------------------------------------------------------------
# time history of the drift field for the mean-field particles


class ForceHistory:
    """Stored ``k^nu * rho_t`` fields on a uniform time grid ``t_k = k dt``."""

    def __init__(self, L: float, n_g: int, dt: float, spec, chi: float):
        self.L = L
        self.n_g = n_g
        self.dt = dt
        self.spec = spec
        self.chi = chi
        self.fields: list[np.ndarray] = []
        self.masses: list[float] = []
        self.centers_of_mass: list[np.ndarray] = []

    @property
    def cell(self) -> float:
        return 2.0 * self.L / self.n_g

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.fields)) * self.dt

    def append(self, field_: DensityField) -> None:
        self.fields.append(field_.kernel_force(self.spec))
        self.masses.append(field_.mass())
        self.centers_of_mass.append(field_.center_of_mass())

    def drift(self, x, t: float) -> np.ndarray:
        """Mean-field drift ``-chi (k^nu * rho_t)(x)`` for points ``x`` of shape (M, 2)."""
        return -self.chi * self.kernel_force_at(x, t)

    def kernel_force_at(self, x, t: float) -> np.ndarray:
        if not self.fields:
            raise ValueError("empty force history")
        pos = t / self.dt
        k0 = int(math.floor(pos + 1e-9))
        k0 = min(max(k0, 0), len(self.fields) - 1)
        theta = pos - k0
        if abs(theta) < 1e-9 or k0 == len(self.fields) - 1:
            return self._at(x, k0)
        return (1.0 - theta) * self._at(x, k0) + theta * self._at(x, k0 + 1)

    def _at(self, x, k):
        return force_at(self.fields[k], self.L, x, self.masses[k], self.centers_of_mass[k])


def force_at(grid_force: np.ndarray, L: float, x, mass: float = 1.0, center=(0.0, 0.0)) -> np.ndarray:
    """Bilinear interpolation of a cell-centred field (2, n, n); monopole outside the box."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = grid_force.shape[-1]
    h = 2.0 * L / n
    u = (x[:, 0] + L) / h - 0.5
    v = (x[:, 1] + L) / h - 0.5
    i0 = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    j0 = np.clip(np.floor(v).astype(np.int64), 0, n - 2)
    a = np.clip(u - i0, 0.0, 1.0)
    b = np.clip(v - j0, 0.0, 1.0)
    out = np.empty_like(x)
    for c in range(2):
        g = grid_force[c]
        out[:, c] = (
            (1 - a) * (1 - b) * g[i0, j0]
            + a * (1 - b) * g[i0 + 1, j0]
            + (1 - a) * b * g[i0, j0 + 1]
            + a * b * g[i0 + 1, j0 + 1]
        )
    outside = (np.abs(x[:, 0]) > L) | (np.abs(x[:, 1]) > L)
    if outside.any():
        out[outside] = monopole_force(x[outside], mass, center)
    return out


# ---------------------------------------------------------------------------
# driver


@dataclass
class PdeRun:
    final: DensityField
    history: ForceHistory | None
    reports: list[EnergyReport]
    max_density: list[float]
    domain_too_small: bool = False
    resolution_limited: bool = False

    def report_table(self) -> np.ndarray:
        return np.array([r.row() for r in self.reports])


def solve_pde(
    field_: DensityField,
    chi: float,
    spec,
    T: float,
    dt: float,
    report_every: int = 1,
    keep_history: bool = True,
    resolution_mass: float = 0.05,
) -> PdeRun:
    """Advance to ``T`` in macro steps ``dt`` (sub-cycled when CFL demands)."""
    n_steps = int(round(T / dt)) if dt > 0 else 0
    if n_steps and not math.isclose(n_steps * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    history = ForceHistory(field_.L, field_.n_g, dt, spec, chi) if keep_history else None
    reports = [energy_report(field_, chi)]
    max_density = [field_.sup_norm()]
    if history is not None:
        history.append(field_)
    run = PdeRun(field_, history, reports, max_density)
    for k in range(1, n_steps + 1):
        lim = cfl_limit(field_, chi, spec)
        n_sub = max(1, int(math.ceil(dt / lim - 1e-12)))
        sub = dt / n_sub
        for _ in range(n_sub):
            field_ = step_density(field_, chi, spec, sub, check_cfl=False)
        field_ = replace(field_, t=k * dt)
        if history is not None:
            history.append(field_)
        max_density.append(field_.sup_norm())
        if k % report_every == 0 or k == n_steps:
            reports.append(energy_report(field_, chi))
        if field_.edge_mass_fraction() >= EDGE_MASS_LIMIT:
            run.domain_too_small = True
        if field_.sup_norm() * field_.area >= resolution_mass:
            run.resolution_limited = True
    run.final = field_
    return run


# ---------------------------------------------------------------------------
# snapshot I/O: little-endian header (L: f64, n_g: i64, t: f64) then row-major f64 cells

_HEADER = struct.Struct("<dqd")


def write_snapshot(field_: DensityField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(field_.L, field_.n_g, field_.t))
        fh.write(np.ascontiguousarray(field_.rho, dtype="<f8").tobytes())


def read_snapshot(path) -> DensityField:
    with open(path, "rb") as fh:
        L, n, t = _HEADER.unpack(fh.read(_HEADER.size))
        rho = np.frombuffer(fh.read(), dtype="<f8").reshape(n, n).copy()
    return DensityField(L, n, rho, t)
