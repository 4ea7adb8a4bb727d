"""Sweeps over (N, chi, alpha): one PDE solve per cell, coupled replicas on a worker pool.

Output layout under ``out``::

    metrics.csv                 tidy rows: metric, N, chi, alpha, replica, t, value
    summary.json                per-cell aggregates plus the manifest
    cell_XXX/pde_energy.csv     EnergyReport rows of the cell's PDE solve
    cell_XXX/replica_YYY.csv    RunRecord time series
    cell_XXX/replica_YYY.json   RunRecord manifest

Every file is a deterministic function of the config (minus ``threads`` and
``out``); replicas write nothing shared and are merged in replica order.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .kernel import CutoffSpec
from .metrics import (
    JSchedule,
    LolnResult,
    TailEstimate,
    exceptional_set_frequencies,
    geometric_grid,
    j_process,
    loln_statistic,
    marginal_w1,
    sample_field,
    tail_probability,
)
from .noise import STREAM_AUX, NoisePlan, derive_replica_seed
from .pde import EnergyReport, PdeRun, init_density, solve_pde
from .sde import CoupledRunConfig, RunRecord, default_step, run_coupled

FAIL_FRACTION = 0.2
SCHEMA_VERSION = 1
W1_MAX_SAMPLES = 2048

TIDY_COLUMNS = ("metric", "N", "chi", "alpha", "replica", "t", "value")


# ---------------------------------------------------------------------------
# rate fits


@dataclass(frozen=True)
class RateFit:
    exponent: float
    stderr: float
    intercept: float

    def ci(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.exponent - z * self.stderr, self.exponent + z * self.stderr


def fit_rate(x, y) -> RateFit:
    """Least-squares slope of ``log y`` against ``log x`` with its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("rate fits need positive values")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    dof = x.size - 2
    sxx = np.sum((lx - lx.mean()) ** 2)
    se = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return RateFit(float(coef[0]), se, float(coef[1]))


def linear_slope(t, y) -> float:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 2:
        return float("nan")
    return float(np.polyfit(t, y, 1)[0])


# ---------------------------------------------------------------------------
# results


@dataclass
class ReplicaResult:
    replica: int
    seed: int
    record: RunRecord
    msr_slope: float = float("nan")
    w1: float = float("nan")
    w1_control: float = float("nan")
    loln: LolnResult | None = None
    j_times: np.ndarray | None = None
    j_values: np.ndarray | None = None

    @property
    def failed(self) -> bool:
        return self.record.failed


@dataclass
class CellResult:
    index: int
    N: int
    chi: float
    alpha: float
    h: float
    n_replicas: int
    n_failed: int
    failed: bool
    pde_slope: float
    free_energy_monotone: bool
    pde_mass_drift: float
    pde_flags: dict
    tail: TailEstimate | None
    median_sup: float
    msr_slope_mean: float
    msr_slope_se: float
    w1_median: float
    w1_control_median: float
    loln_median: float
    loln_exceed_fraction: float
    exceptional: dict
    replicas: list = field(default_factory=list, repr=False)
    pde: PdeRun | None = field(default=None, repr=False)

    def ok(self) -> list[ReplicaResult]:
        return [r for r in self.replicas if not r.failed]

    def values(self, name: str) -> np.ndarray:
        ok = self.ok()
        if name == "sup":
            return np.array([r.record.sup_distance for r in ok])
        if name == "loln":
            return np.array([r.loln.k_stat for r in ok if r.loln is not None])
        return np.array([getattr(r, name) for r in ok])

    def summary(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "index", "N", "chi", "alpha", "h", "n_replicas", "n_failed", "failed",
                "pde_slope", "free_energy_monotone", "pde_mass_drift", "pde_flags",
                "median_sup", "msr_slope_mean", "msr_slope_se", "w1_median",
                "w1_control_median", "loln_median", "loln_exceed_fraction", "exceptional",
            )
        }
        d["tail"] = asdict(self.tail) if self.tail is not None else None
        d["replica_seeds"] = [r.seed for r in self.replicas]
        return _clean(d)


@dataclass
class SweepResult:
    config: ExperimentConfig
    cells: list[CellResult]
    out: Path | None = None

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "code_version": __version__,
            "config": self.config.science_dict(),
            "config_hash": self.config.content_hash(),
            "seed": self.config.seed,
        }

    def summary(self) -> dict:
        return {"manifest": self.manifest(), "cells": [c.summary() for c in self.cells]}

    def cell(self, N, chi=None, alpha=None) -> CellResult:
        for c in self.cells:
            if c.N == N and (chi is None or math.isclose(c.chi, chi)) and (alpha is None or math.isclose(c.alpha, alpha)):
                return c
        raise KeyError((N, chi, alpha))


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# running one cell


def cell_step(cfg: ExperimentConfig, N: int, alpha: float) -> float:
    return cfg.h if cfg.h > 0 else default_step(CutoffSpec(alpha, N))


def solve_cell_pde(cfg: ExperimentConfig, N: int, chi: float, alpha: float) -> PdeRun:
    spec = CutoffSpec(alpha, N)
    h = cell_step(cfg, N, alpha)
    field0 = init_density(cfg.initial_density(), cfg.L, cfg.n_g)
    return solve_pde(field0, chi, spec, cfg.T, h, report_every=cfg.report_every)


def _run_replica(cfg, cell_index, N, chi, alpha, h, pde: PdeRun, r) -> ReplicaResult:
    seed = derive_replica_seed(cfg.seed, cell_index, r)
    z_times = geometric_grid(cfg.T, h, cfg.j_points) if cfg.j_process and cfg.T > 0 else ()
    run_cfg = CoupledRunConfig(N, chi, alpha, cfg.T, h, cfg.initial_density(), seed, r, z_times)
    rec = run_coupled(run_cfg, pde.history)
    res = ReplicaResult(r, seed, rec)
    if rec.failed:
        return res
    res.msr_slope = linear_slope(rec.t, rec.mean_sq_radius)
    final = pde.final
    n_steps = rec.t.size - 1
    noise = NoisePlan(seed, h, r)
    if cfg.w1:
        m = min(N, W1_MAX_SAMPLES) if cfg.w1_samples == 0 else min(cfg.w1_samples, N)
        res.w1 = marginal_w1(rec.final_X, final, m, noise, cfg.w1_repeats, step=n_steps).mean
        # same-law control: an i.i.d. cloud drawn from the field in place of the particles
        ctrl = sample_field(final, N, noise.generator(n_steps + 1, STREAM_AUX))
        res.w1_control = marginal_w1(ctrl, final, m, noise, cfg.w1_repeats, step=n_steps + 2).mean
    if cfg.loln:
        res.loln = loln_statistic(rec.final_Y, final, chi, CutoffSpec(alpha, N))
    if cfg.j_process and rec.z_gaps is not None and N > 1:
        res.j_times = rec.z_times
        res.j_values = j_process(rec.z_times, rec.z_gaps, JSchedule(N, alpha), cfg.T)
    return res


def _median(a) -> float:
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return float(np.median(a)) if a.size else float("nan")


def run_cell(cfg: ExperimentConfig, cell_index: int, N: int, chi: float, alpha: float, pool=None, pde: PdeRun | None = None) -> CellResult:
    h = cell_step(cfg, N, alpha)
    if pde is None:
        pde = solve_cell_pde(cfg, N, chi, alpha)
    work = lambda r: _run_replica(cfg, cell_index, N, chi, alpha, h, pde, r)  # noqa: E731
    if pool is None:
        reps = [work(r) for r in range(cfg.replicas)]
    else:
        reps = list(pool.map(work, range(cfg.replicas)))
    ok = [r for r in reps if not r.failed]
    n_failed = len(reps) - len(ok)
    tab = pde.report_table()
    F = tab[:, 5]
    sups = np.array([r.record.sup_distance for r in ok])
    slopes = np.array([r.msr_slope for r in ok])
    lolns = [r.loln for r in ok if r.loln is not None]
    return CellResult(
        index=cell_index,
        N=N,
        chi=chi,
        alpha=alpha,
        h=h,
        n_replicas=len(reps),
        n_failed=n_failed,
        failed=n_failed > FAIL_FRACTION * len(reps),
        pde_slope=linear_slope(tab[:, 0], tab[:, 2]),
        free_energy_monotone=bool(np.all(np.diff(F) <= 1e-3 * np.abs(F[:-1]))),
        pde_mass_drift=float(np.max(np.abs(tab[:, 1] - tab[0, 1]))),
        pde_flags={"domain_too_small": pde.domain_too_small, "resolution_limited": pde.resolution_limited},
        tail=tail_probability(sups, float(N) ** -alpha) if sups.size else None,
        median_sup=_median(sups),
        msr_slope_mean=float(np.mean(slopes)) if slopes.size else float("nan"),
        msr_slope_se=float(np.std(slopes, ddof=1) / math.sqrt(slopes.size)) if slopes.size > 1 else float("nan"),
        w1_median=_median([r.w1 for r in ok]),
        w1_control_median=_median([r.w1_control for r in ok]),
        loln_median=_median([x.k_stat for x in lolns]),
        loln_exceed_fraction=float(np.mean([x.exceeds for x in lolns])) if lolns else float("nan"),
        exceptional=exceptional_set_frequencies(lolns, cfg.exceptional_c) if lolns else {},
        replicas=reps,
        pde=pde,
    )


# ---------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def energy_csv(reports: list[EnergyReport]) -> str:
    lines = [",".join(EnergyReport.COLUMNS)]
    lines += [",".join(_fmt(x) for x in r.row()) for r in reports]
    return "\n".join(lines) + "\n"


def tidy_rows(cell: CellResult):
    key = (cell.N, cell.chi, cell.alpha)
    for r in cell.replicas:
        rec = r.record
        T = float(rec.t[-1]) if rec.t.size else 0.0
        yield ("sup_distance", *key, r.replica, T, rec.sup_distance)
        yield ("failed", *key, r.replica, T, int(rec.failed))
        if r.failed:
            continue
        yield ("msr_slope", *key, r.replica, T, r.msr_slope)
        if math.isfinite(r.w1):
            yield ("w1", *key, r.replica, T, r.w1)
            yield ("w1_control", *key, r.replica, T, r.w1_control)
        if r.loln is not None:
            yield ("loln_K", *key, r.replica, T, r.loln.k_stat)
            yield ("loln_L", *key, r.replica, T, r.loln.l_stat)
            yield ("loln_L2", *key, r.replica, T, r.loln.l2_stat)
        if r.j_values is not None:
            for t, j in zip(r.j_times, r.j_values):
                yield ("J", *key, r.replica, float(t), float(j))


def write_cell(cell: CellResult, out: Path) -> None:
    d = out / f"cell_{cell.index:03d}"
    d.mkdir(parents=True, exist_ok=True)
    if cell.pde is not None:
        (d / "pde_energy.csv").write_text(energy_csv(cell.pde.reports), encoding="utf-8")
    for r in cell.replicas:
        (d / f"replica_{r.replica:03d}.csv").write_text(r.record.to_csv(), encoding="utf-8")
        (d / f"replica_{r.replica:03d}.json").write_text(
            json.dumps(_clean(r.record.manifest()), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )


def write_sweep(result: SweepResult, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(TIDY_COLUMNS)]
    for cell in result.cells:
        write_cell(cell, out)
        lines += [",".join(_fmt(x) if not isinstance(x, str) else x for x in row) for row in tidy_rows(cell)]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    result.out = out
    return out


# ---------------------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig, out=None, threads: int | None = None, progress=None, pde_cache: dict | None = None) -> SweepResult:
    """Run every cell; ``out=None`` skips persistence.

    ``pde_cache`` maps ``(N, chi, alpha)`` to an existing :class:`PdeRun` with
    the same grid, horizon and step, so callers can share solves.
    """
    threads = cfg.threads if threads is None else threads
    cells = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for idx, N, chi, alpha in cfg.cells():
            pde = None if pde_cache is None else pde_cache.get((N, chi, alpha))
            if pde is None:
                pde = solve_cell_pde(cfg, N, chi, alpha)
                if pde_cache is not None:
                    pde_cache[(N, chi, alpha)] = pde
            cell = run_cell(cfg, idx, N, chi, alpha, pool=pool, pde=pde)
            if pde_cache is None:
                # the force history is ~n_g^2 * 16 bytes per step; replicas are done with it
                cell.pde = replace(pde, history=None)
            cells.append(cell)
            if progress is not None:
                progress(cell)
    finally:
        if pool is not None:
            pool.shutdown()
    result = SweepResult(cfg, cells)
    if out is not None:
        write_sweep(result, out)
    return result


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)
