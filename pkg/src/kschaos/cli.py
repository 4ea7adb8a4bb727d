"""Command line entry point: ``kschaos <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, defaults_toml, load_config
from .harness import (
    _clean,
    cell_step,
    energy_csv,
    fit_rate,
    linear_slope,
    run_sweep,
    solve_cell_pde,
)
from .kernel import CutoffSpec, radial_table
from .noise import derive_replica_seed
from .pde import write_snapshot
from .sde import CoupledRunConfig, run_coupled

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat TOML config; omitted keys take defaults")
    p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads for replicas")
    p.add_argument("--replicas", type=int, metavar="N", help="replicas per cell")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kschaos", description="Regularised Keller-Segel particle and PDE experiments.")
    p.add_argument("--print-defaults", action="store_true", help="print the default config as TOML and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("simulate-pde", help="solve the regularised PDE for every cell; write energy CSV and final snapshot")
    _common(s)
    s.add_argument("--report-every", type=int, metavar="K", help="energy report cadence in steps")

    s = sub.add_parser("couple", help="coupled X/Y runs for the first cell; write RunRecord CSV and JSON")
    _common(s)

    s = sub.add_parser("sweep", help="full sweep over N, chi, alpha with metrics")
    _common(s)

    s = sub.add_parser("metrics", help="aggregate metrics.csv of a finished sweep in --out")
    _common(s)

    s = sub.add_parser("kernel-dump", help="radial profile table of the first cell as CSV")
    _common(s)
    s.add_argument("--points", type=int, default=301, metavar="K", help="radii in [0, 3/nu]")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.replace(seed=args.seed, out=args.out, threads=args.threads, replicas=args.replicas)


def _first_cell(cfg):
    return next(iter(cfg.cells()))


def cmd_simulate_pde(cfg: ExperimentConfig, args) -> int:
    if args.report_every is not None:
        cfg = cfg.replace(report_every=args.report_every)
    out = Path(cfg.out)
    for idx, N, chi, alpha in cfg.cells():
        run = solve_cell_pde(cfg, N, chi, alpha)
        d = out / f"pde_cell_{idx:03d}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "energy.csv").write_text(energy_csv(run.reports), encoding="utf-8")
        write_snapshot(run.final, d / "final.bin")
        tab = run.report_table()
        F = tab[:, 5]
        print(
            f"cell {idx}: N={N} chi={chi:.6g} alpha={alpha:g} "
            f"m2 slope={linear_slope(tab[:, 0], tab[:, 2]):.6f} "
            f"mass drift={np.max(np.abs(tab[:, 1] - tab[0, 1])):.3e} "
            f"free energy non-increasing={bool(np.all(np.diff(F) <= 1e-3 * np.abs(F[:-1])))}"
        )
    return EXIT_OK


def cmd_couple(cfg: ExperimentConfig, args) -> int:
    idx, N, chi, alpha = _first_cell(cfg)
    n_rep = args.replicas if args.replicas is not None else 1
    h = cell_step(cfg, N, alpha)
    pde = solve_cell_pde(cfg, N, chi, alpha)
    d = Path(cfg.out) / "couple"
    d.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for r in range(n_rep):
        seed = derive_replica_seed(cfg.seed, idx, r)
        rec = run_coupled(CoupledRunConfig(N, chi, alpha, cfg.T, h, cfg.initial_density(), seed, r), pde.history)
        (d / f"replica_{r:03d}.csv").write_text(rec.to_csv(), encoding="utf-8")
        (d / f"replica_{r:03d}.json").write_text(json.dumps(_clean(rec.manifest()), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        print(f"replica {r}: sup |X - Y|_inf = {rec.sup_distance:.6g}" + (f" FAILED: {rec.message}" if rec.failed else ""))
        if rec.failed:
            status = EXIT_RUNTIME
    return status


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    def report(cell):
        tail = cell.tail
        print(
            f"cell {cell.index}: N={cell.N} chi={cell.chi:.6g} alpha={cell.alpha:g} "
            f"ok={cell.n_replicas - cell.n_failed}/{cell.n_replicas} median sup={cell.median_sup:.6g} "
            f"tail={tail.estimate if tail else float('nan'):.3f} W1={cell.w1_median:.6g}"
            + (" FAILED" if cell.failed else ""),
            flush=True,
        )

    res = run_sweep(cfg, out=cfg.out, progress=report)
    return EXIT_RUNTIME if any(c.failed for c in res.cells) else EXIT_OK


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    path = Path(cfg.out) / "metrics.csv"
    if not path.is_file():
        raise ConfigError(f"no metrics.csv under {cfg.out}; run `kschaos sweep --out {cfg.out}` first")
    groups = defaultdict(list)
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["metric"] == "J":
                continue
            key = (row["metric"], int(row["N"]), float(row["chi"]), float(row["alpha"]))
            groups[key].append(float(row["value"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "N", "chi", "alpha", "count", "mean", "median"])
    for key in sorted(groups):
        v = np.array(groups[key])
        w.writerow([key[0], key[1], repr(key[2]), repr(key[3]), v.size, repr(float(v.mean())), repr(float(np.median(v)))])
    (Path(cfg.out) / "metrics_summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    # decay rates of medians against N, per (metric, chi, alpha)
    series = defaultdict(list)
    for (metric, N, chi, alpha), v in groups.items():
        if metric in ("sup_distance", "w1", "loln_K"):
            series[(metric, chi, alpha)].append((N, float(np.median(v))))
    for key in sorted(series):
        pts = sorted(series[key])
        if len(pts) >= 3 and all(y > 0 for _, y in pts):
            fit = fit_rate([p[0] for p in pts], [p[1] for p in pts])
            print(f"rate {key[0]} chi={key[1]:.6g} alpha={key[2]:g}: exponent {fit.exponent:.4f} +- {fit.stderr:.4f}")
    return EXIT_OK


def cmd_kernel_dump(cfg: ExperimentConfig, args) -> int:
    _, N, _, alpha = _first_cell(cfg)
    spec = CutoffSpec(alpha, N)
    tab = radial_table(spec, np.linspace(0.0, 3.0 / spec.nu, max(2, args.points)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(tab))
    for row in zip(*tab.values()):
        w.writerow([repr(float(x)) for x in row])
    if args.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "kernel_profile.csv").write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "simulate-pde": cmd_simulate_pde,
    "couple": cmd_couple,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
    "kernel-dump": cmd_kernel_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(defaults_toml())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
