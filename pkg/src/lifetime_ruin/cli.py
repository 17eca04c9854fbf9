"""Command-line interface.

Exit codes: 0 success, 1 configuration or usage error, 2 solver did not
converge, 3 a verification check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks
from .closed_form import compute_constants, frictionless_psi_k, lower_bound_psi, midpoint_k, upper_bound_psi
from .config import ExperimentConfig
from .grid import (
    NodeClass,
    build_grid,
    read_region_csv,
    read_value_csv,
    write_region_csv,
    write_value_csv,
)
from .market import ConfigError
from .simulation import StrategySpec, estimate_ruin_probability
from .solver import NonConvergence, extract_region_map, solve

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")


def _outdir(cfg: ExperimentConfig, override):
    out = Path(override) if override else cfg.outputs
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solve_and_write(cfg: ExperimentConfig, out: Path):
    try:
        field, rmap, report = solve(cfg.market, cfg.grid, cfg.solver)
    except NonConvergence as exc:
        if exc.report is not None:
            _write_json(out / "report.json", exc.report.to_json())
        raise
    write_value_csv(field, out / "value.csv")
    write_region_csv(rmap, out / "regions.csv")
    _write_json(out / "report.json", report.to_json())
    return field, rmap, report


def _load_or_solve(cfg: ExperimentConfig, out: Path):
    """Field and regions from ``out`` if a matching solve is saved there, else a fresh solve."""
    grid = build_grid(cfg.market, cfg.grid)
    vpath = out / "value.csv"
    if vpath.is_file():
        field = read_value_csv(grid, vpath)
        rpath = out / "regions.csv"
        rmap = read_region_csv(grid, rpath) if rpath.is_file() else extract_region_map(field, cfg.solver)
        return field, rmap
    field, rmap, _ = solve(cfg.market, grid, cfg.solver)
    return field, rmap


def cmd_solve(cfg, args):
    out = _outdir(cfg, args.out)
    _, rmap, report = _solve_and_write(cfg, out)
    print(f"converged in {report.iterations} iterations, sup update {report.sup_update:.3g}, "
          f"residual {report.residual:.3g}; regions {rmap.counts()}")
    return EXIT_OK


def cmd_bounds(cfg, args):
    out = _outdir(cfg, args.out)
    p = cfg.market
    grid = build_grid(p, cfg.grid)
    cf = compute_constants(p)
    k = midpoint_k(p)
    X, Y = grid.mesh()
    mask = grid.in_domain
    x, y = X[mask], Y[mask]
    cols = [upper_bound_psi(p, x, y), lower_bound_psi(p, cf, x, y), frictionless_psi_k(p, cf, k, x, y)]
    # ruin- and safe-side nodes take their boundary data exactly
    cls = grid.node_class[mask]
    for col in cols:
        col[cls == NodeClass.RUIN_BOUNDARY] = 1.0
        col[cls == NodeClass.SAFE_BOUNDARY] = 0.0
    with open(out / "bounds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "psi_upper", "psi_lower", "psi_k_mid"])
        for row in zip(x, y, *cols):
            w.writerow([_fmt(v) for v in row])
    print(f"wrote {mask.sum()} rows to {out / 'bounds.csv'}")
    return EXIT_OK


def _mc_settings(cfg, args):
    mc = cfg.mc
    changes = {k: getattr(args, k) for k in ("strategy", "x0", "y0", "dt", "n_paths", "mode", "seed")
               if getattr(args, k, None) is not None}
    try:
        return replace(mc, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(cfg, args):
    out = _outdir(cfg, args.out)
    mc = _mc_settings(cfg, args)
    workers = cfg.workers if args.workers is None else args.workers
    if mc.strategy == "feedback":
        _, rmap = _load_or_solve(cfg, out)
        strat = StrategySpec.feedback(rmap)
    else:
        strat = StrategySpec(mc.strategy)
    try:
        res = estimate_ruin_probability(cfg.market, strat, mc.x0, mc.y0, mc.dt, mc.n_paths, mc.mode, mc.seed,
                                        mc.t_max, workers=workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_json(out / "mc.json", res.to_json())
    print(f"estimate {res.estimate:.6f} +- {res.stderr:.6f} ({res.n_paths} paths)")
    return EXIT_OK


def run_checks(cfg: ExperimentConfig, out: Path, names=None):
    """Run the selected checks; returns a list of ``CheckResult``."""
    p, mc, vc = cfg.market, cfg.mc, cfg.verify
    names = vc.selected(checks.CHECK_NAMES) if names is None else names
    results = []
    field = None
    if {"boundary", "residual", "sandwich"} & set(names):
        field, _ = _load_or_solve(cfg, out)
    for name in names:
        if name == "boundary":
            results.append(checks.check_boundary(field))
        elif name == "residual":
            results.append(checks.check_residual(field, cfg.solver))
        elif name == "sandwich":
            results.append(checks.check_sandwich(field, vc.slack))
        elif name == "frictionless":
            results.append(checks.check_frictionless(p, cfg.grid, cfg.solver, vc.frictionless_cost, vc.slack))
        elif name == "lyapunov":
            results.append(checks.check_lyapunov(p, cfg.grid, vc.lyapunov_k, vc.lyapunov_p))
        elif name == "martingale":
            results.extend(checks.check_martingale(p, mc.x0, mc.y0, mc.horizon, mc.n_paths, mc.seed, mc.dt,
                                                   cfg.workers))
        elif name == "mc_upper":
            results.append(checks.check_mc_upper(p, mc.x0, mc.y0, mc.n_paths, mc.seed, mc.dt, cfg.workers))
        elif name == "refinement":
            results.append(checks.check_refinement(p, cfg.grid, cfg.solver))
    return results


def cmd_verify(cfg, args):
    out = _outdir(cfg, args.out)
    names = None
    if args.checks:
        try:
            names = replace(cfg.verify, checks=args.checks).selected(checks.CHECK_NAMES)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    results = run_checks(cfg, out, names)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: metric={r.metric:.6g} threshold={r.threshold:.6g}")
    ok = all(r.passed for r in results)
    _write_json(out / "verify.json", {"pass": ok, "checks": [r.to_json() for r in results]})
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_sweep(cfg, args):
    sizes = list(args.sizes or cfg.sweep_sizes)
    if len(sizes) < 2:
        raise UsageError("sweep needs at least two grid sizes")
    if any(b <= a for a, b in zip(sizes[:-1], sizes[1:])):
        raise UsageError("grid sizes must increase")
    for a, b in zip(sizes[:-1], sizes[1:]):
        if (b - 1) % (a - 1):
            raise UsageError(f"grid size {b} is not a refinement of {a}")
    out = _outdir(cfg, args.out)
    p = cfg.market
    base = replace(cfg.grid, nx=sizes[0], ny=sizes[0]).resolve(p)
    specs = [base]
    for a, b in zip(sizes[:-1], sizes[1:]):
        specs.append(specs[-1].refined((b - 1) // (a - 1)))
    diffs, fields = checks.nested_differences(p, specs, cfg.solver)
    frictionless = args.frictionless
    if frictionless:
        fp = p.replace(lambda_buy=cfg.verify.frictionless_cost, mu_sell=cfg.verify.frictionless_cost)
        ffields = checks.nested_differences(fp, specs, cfg.solver)[1]
        cf = compute_constants(fp)
        errs = []
        for f in ffields:
            x, y = checks.interior_coords(f.grid)
            errs.append(float(np.max(np.abs(f.flat[f.grid.active] - frictionless_psi_k(fp, cf, 1.0, x, y)))))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "sup_diff_prev"] + (["err_psi1"] if frictionless else []))
        for i, n in enumerate(sizes):
            row = [str(n), "" if i == 0 else _fmt(diffs[i - 1])]
            if frictionless:
                row.append(_fmt(errs[i]))
            w.writerow(row)
    print(f"refinement differences: {', '.join(f'{d:.4g}' for d in diffs)}")
    return EXIT_OK


def cmd_region_map(cfg, args):
    out = _outdir(cfg, args.out)
    src = Path(args.value) if args.value else out / "value.csv"
    if not src.is_file():
        raise UsageError(f"no saved value field at {src}")
    grid = build_grid(cfg.market, cfg.grid)
    try:
        field = read_value_csv(grid, src)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rmap = extract_region_map(field, cfg.solver)
    write_region_csv(rmap, out / "regions.csv")
    print(f"regions {rmap.counts()}")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "region-map": cmd_region_map,
}


class _Parser(argparse.ArgumentParser):
    # usage errors share exit code 1 with configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    ap = _Parser(prog="lifetime-ruin", description="Minimal lifetime ruin probability under transaction costs.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="INI configuration file")
        sp.add_argument("--out", help="output directory (overrides [run] outputs)")
        if name == "simulate":
            sp.add_argument("--strategy", choices=["liquidate_now", "no_transaction", "feedback"])
            sp.add_argument("--x0", type=float)
            sp.add_argument("--y0", type=float)
            sp.add_argument("--dt", type=float)
            sp.add_argument("--n-paths", type=int, dest="n_paths")
            sp.add_argument("--mode", choices=["sample_death", "discount_death"])
            sp.add_argument("--seed", type=int)
            sp.add_argument("--workers", type=int)
        elif name == "verify":
            sp.add_argument("--checks", help="comma-separated subset of: " + ", ".join(checks.CHECK_NAMES))
        elif name == "sweep":
            sp.add_argument("--sizes", type=int, nargs="+")
            sp.add_argument("--frictionless", action="store_true", help="add error against the k=1 closed form")
        elif name == "region-map":
            sp.add_argument("--value", help="saved value.csv (default: <out>/value.csv)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
