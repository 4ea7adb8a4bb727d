"""Coupled Euler-Maruyama integration of the real, mean-field and intermediate systems.

All three families are driven by one :class:`~kschaos.noise.NoisePlan`: the
increment of particle ``i`` at step ``k`` is the same array entry for ``X``,
``Y`` and every ``Z``.  The update is always written ``x + h * drift + dW`` so
that equal drifts give bitwise equal states.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .densities import InitialDensitySpec
from .kernel import CutoffSpec, n_body_forces_counted, pairs_in_cutoff
from .noise import NoisePlan
from .pde import ForceHistory

MAX_LIVE_Z = 64


class NonFiniteState(RuntimeError):
    """A step produced NaN or inf; the step size is too large for the cutoff."""


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"positions must have shape (N, 2), got {self.positions.shape}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions.copy(), self.time)

    def mean_sq_radius(self) -> float:
        return float(np.mean(np.einsum("ij,ij->i", self.positions, self.positions)))


def default_step(spec: CutoffSpec) -> float:
    """``h = min(1e-3, 0.1 / nu^2)``."""
    return min(1e-3, 0.1 / spec.nu**2)


def check_step(h: float, spec: CutoffSpec) -> None:
    if h > 0.1 / spec.nu**2 * (1 + 1e-12):
        raise ValueError(f"step {h:g} exceeds the stability cap 0.1/nu^2 = {0.1 / spec.nu**2:g}")


def sample_initial(spec: InitialDensitySpec, n: int, noise: NoisePlan) -> ParticleEnsemble:
    return ParticleEnsemble(spec.sample(n, noise), 0.0)


def _advance(pos, drift, h, dw, t):
    new = pos + h * drift + dw
    if not np.isfinite(new).all():
        raise NonFiniteState(f"non-finite position at t={t:g}; reduce h for this cutoff")
    return new


def step_real(X: ParticleEnsemble, chi: float, spec: CutoffSpec, noise: NoisePlan, step: int, dw=None):
    """One Euler-Maruyama step with the pairwise force.  Returns ``(X', pairs_in_cutoff)``."""
    h = noise.h
    if dw is None:
        dw = noise.increments(X.n, step)
    if chi == 0.0:
        drift, close = np.zeros_like(X.positions), -1
    else:
        drift, close = n_body_forces_counted(X.positions, chi, spec)
    new = _advance(X.positions, drift, h, dw, X.time)
    return ParticleEnsemble(new, X.time + h), close


def step_meanfield(Y: ParticleEnsemble, history: ForceHistory, noise: NoisePlan, step: int, dw=None):
    """One Euler-Maruyama step with the interpolated mean-field drift at time ``Y.time``."""
    h = noise.h
    if dw is None:
        dw = noise.increments(Y.n, step)
    if history.chi == 0.0:
        drift = np.zeros_like(Y.positions)
    else:
        drift = history.drift(Y.positions, Y.time)
    new = _advance(Y.positions, drift, h, dw, Y.time)
    return ParticleEnsemble(new, Y.time + h)


@dataclass
class CoupledState:
    X: ParticleEnsemble
    Y: ParticleEnsemble
    Z: list = field(default_factory=list)  # (birth time, ensemble)
    step: int = 0

    @property
    def time(self) -> float:
        return self.X.time

    def births(self) -> list[float]:
        return [s for s, _ in self.Z]


def spawn_intermediate(state: CoupledState, s: float, tol: float = 1e-12) -> CoupledState:
    """Start a mean-field process ``Z_{., s}`` from a bitwise copy of ``X(s)``."""
    if abs(s - state.time) > tol:
        raise ValueError(f"can only spawn at the current time {state.time:g}, not {s:g}")
    if any(abs(b - s) <= tol for b in state.births()):
        raise ValueError(f"an intermediate process born at s={s:g} already exists")
    if len(state.Z) >= MAX_LIVE_Z:
        raise ValueError(f"at most {MAX_LIVE_Z} intermediate processes may be live")
    state.Z.append((state.time, state.X.copy()))
    return state


def step_coupled(state: CoupledState, chi: float, spec: CutoffSpec, history: ForceHistory, noise: NoisePlan):
    """Advance ``X``, ``Y`` and every ``Z`` by one step on shared noise."""
    dw = noise.increments(state.X.n, state.step)
    X, close = step_real(state.X, chi, spec, noise, state.step, dw)
    Y = step_meanfield(state.Y, history, noise, state.step, dw)
    Z = [(s, step_meanfield(z, history, noise, state.step, dw)) for s, z in state.Z]
    return CoupledState(X, Y, Z, state.step + 1), close


def sup_norm_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledRunConfig:
    n: int
    chi: float
    alpha: float
    T: float
    h: float | None = None
    density: InitialDensitySpec = field(default_factory=InitialDensitySpec)
    seed: int = 0
    replica: int = 0
    z_times: tuple = ()

    def cutoff(self) -> CutoffSpec:
        return CutoffSpec(self.alpha, self.n)

    def step_size(self) -> float:
        return default_step(self.cutoff()) if self.h is None else self.h

    def n_steps(self) -> int:
        h = self.step_size()
        k = int(round(self.T / h)) if h > 0 else 0
        if k and not math.isclose(k * h, self.T, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"T={self.T} is not a multiple of h={h}")
        return k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["density"] = asdict(self.density)
        d["h"] = self.step_size()
        return d


@dataclass
class RunRecord:
    config: dict
    seed: int
    replica: int
    t: np.ndarray
    sup_dist: np.ndarray
    running_sup: np.ndarray
    mean_sq_radius: np.ndarray
    n_pairs_in_cutoff: np.ndarray
    failed: bool = False
    message: str = ""
    final_X: np.ndarray | None = None
    final_Y: np.ndarray | None = None
    z_times: np.ndarray | None = None
    z_gaps: np.ndarray | None = None  # [k_s, k_tau] = |Z_{s,s} - Z_{s,tau}|_inf, nan if tau > s

    CSV_COLUMNS = ("t", "sup_dist", "mean_sq_radius", "n_pairs_in_cutoff")

    @property
    def sup_distance(self) -> float:
        return float(self.running_sup[-1]) if self.running_sup.size else 0.0

    def csv_rows(self):
        for row in zip(self.t, self.sup_dist, self.mean_sq_radius, self.n_pairs_in_cutoff):
            yield (repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), str(int(row[3])))

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        lines += [",".join(r) for r in self.csv_rows()]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config, sort_keys=True).encode())
        h.update(self.to_csv().encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "schema_version": 1,
            "config": self.config,
            "seed": self.seed,
            "replica": self.replica,
            "failed": self.failed,
            "message": self.message,
            "sup_distance": self.sup_distance,
            "content_hash": self.content_hash(),
        }


def run_coupled(cfg: CoupledRunConfig, history: ForceHistory) -> RunRecord:
    """Integrate ``X`` and ``Y`` from a shared i.i.d. start on a shared noise plan.

    ``history`` must hold the mean-field drift on the same time grid.  Optional
    intermediate processes are spawned at ``cfg.z_times`` and their gaps to
    ``X`` recorded at the same times.
    """
    spec = cfg.cutoff()
    h = cfg.step_size()
    check_step(h, spec)
    n_steps = cfg.n_steps()
    if n_steps and not math.isclose(history.dt, h, rel_tol=1e-12):
        raise ValueError(f"force history cadence {history.dt:g} differs from h={h:g}")
    noise = NoisePlan(cfg.seed, h, cfg.replica)
    X0 = sample_initial(cfg.density, cfg.n, noise)
    state = CoupledState(X0, X0.copy())

    z_steps = sorted({int(round(s / h)) for s in cfg.z_times}) if h > 0 else [0]
    if len(z_steps) > MAX_LIVE_Z:
        raise ValueError(f"at most {MAX_LIVE_Z} intermediate birth times")
    z_index = {k: i for i, k in enumerate(z_steps)}
    gaps = np.full((len(z_steps), len(z_steps)), np.nan) if z_steps and cfg.z_times else None

    t = np.zeros(n_steps + 1)
    sup = np.zeros(n_steps + 1)
    msr = np.zeros(n_steps + 1)
    pairs = np.zeros(n_steps + 1, dtype=np.int64)
    msr[0] = X0.mean_sq_radius()
    pairs[0] = _count_close(X0.positions, spec)

    failed, message, last = False, "", 0

    def record_z(k):
        if gaps is None or k not in z_index:
            return
        spawn_intermediate(state, state.time)
        row = z_index[k]
        for s, z in state.Z:
            col = z_index[int(round(s / h))]
            gaps[row, col] = sup_norm_distance(state.X.positions, z.positions)

    record_z(0)
    try:
        for k in range(1, n_steps + 1):
            state, close = step_coupled(state, cfg.chi, spec, history, noise)
            t[k] = k * h
            sup[k] = sup_norm_distance(state.X.positions, state.Y.positions)
            msr[k] = state.X.mean_sq_radius()
            pairs[k] = close if close >= 0 else _count_close(state.X.positions, spec)
            last = k
            record_z(k)
    except NonFiniteState as exc:
        failed, message = True, str(exc)
    sl = slice(0, last + 1)
    return RunRecord(
        config=cfg.to_dict(),
        seed=cfg.seed,
        replica=cfg.replica,
        t=t[sl],
        sup_dist=sup[sl],
        running_sup=np.maximum.accumulate(sup[sl]),
        mean_sq_radius=msr[sl],
        n_pairs_in_cutoff=pairs[sl],
        failed=failed,
        message=message,
        final_X=state.X.positions,
        final_Y=state.Y.positions,
        z_times=np.array(z_steps) * h if gaps is not None else None,
        z_gaps=gaps,
    )


def _count_close(pos, spec):
    return pairs_in_cutoff(pos, spec)
