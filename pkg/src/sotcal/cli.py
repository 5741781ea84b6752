"""Command-line front end.

    sotcal gen-synthetic --config CFG --out quotes.csv
    sotcal calibrate     --config CFG --instruments quotes.csv --out RESULT_DIR
    sotcal validate-mc   --config CFG --result RESULT_DIR --out report.csv
    sotcal compare       RESULT_A [RESULT_B | --generating --config CFG] --out diff.csv

Exit status: 0 on success, 1 when a calibration does not reach its
tolerance or a Monte Carlo check fails, 2 for invalid input.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .dual import calibrate, reprice
from .instruments import QuoteRejected, write_instruments
from .mc import McConfig, mc_prices, simulate_paths, write_paths_csv

log = logging.getLogger("sotcal")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _add_common(p: argparse.ArgumentParser, calib: bool = False):
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--grid", metavar="NZ,NR", help="override grid node counts")
    p.add_argument("--dt-days", type=float, help="override the time step (days)")
    if calib:
        p.add_argument("--variant", choices=["joint", "seq", "full-seq", "lsv"])
        p.add_argument("--eps1", type=float, help="tolerance on max |dual gradient| (IV units)")
        p.add_argument("--eps2", type=float, help="policy-iteration tolerance")
        p.add_argument("--bounds", metavar="L11,U11,L22,U22", help="variance bounds (beta22 in scaled units)")
        p.add_argument("--smoothing-iters", type=int, help="maximum reference-model iterations")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sotcal", description="Optimal-transport calibration of local-volatility / short-rate models")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="price the configured instruments under the generating model")
    _add_common(g)
    g.add_argument("--out", required=True, help="instrument CSV to write")

    c = sub.add_parser("calibrate", help="calibrate to an instrument file")
    _add_common(c, calib=True)
    c.add_argument("--instruments", required=True, help="instrument CSV with prices")
    c.add_argument("--out", required=True, help="result directory")
    c.add_argument("--unit-weights", action="store_true", help="weight 1 instead of vegas")
    c.add_argument("--export-every", type=float, default=10.0,
                   help="days between exported surface slices in surfaces.csv (0: every step)")
    c.add_argument("--seed", type=int, help="recorded for a later validate-mc run")

    m = sub.add_parser("validate-mc", help="Monte Carlo check of a calibrated model against ADI prices")
    _add_common(m)
    m.add_argument("--result", required=True, help="result directory of a calibration")
    m.add_argument("--paths", type=int, help="number of paths")
    m.add_argument("--seed", type=int)
    m.add_argument("--n-se", type=float, default=3.0, help="allowed |MC - ADI| in standard errors")
    m.add_argument("--out", required=True, help="report CSV")
    m.add_argument("--paths-out", help="CSV of sample trajectories (config mc.keep_paths)")

    d = sub.add_parser("compare", help="node-wise surface differences of two results")
    d.add_argument("result_a")
    d.add_argument("result_b", nargs="?")
    d.add_argument("--generating", action="store_true", help="compare RESULT_A against the generating model of --config")
    d.add_argument("--config", help="configuration holding the generating model")
    d.add_argument("--out", required=True)
    d.add_argument("--export-every", type=float, default=0.0)
    return ap


def _setup(args, calib: bool = False):
    cfg = io.load_config(args.config)
    kw = dict(grid=args.grid, dt_days=args.dt_days)
    if calib:
        kw.update(variant=args.variant, eps1=args.eps1, eps2=args.eps2, bounds=args.bounds,
                  smoothing_iters=args.smoothing_iters)
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "paths", None) is not None:
        kw["n_paths"] = args.paths
    return io.build_setup(io.apply_overrides(cfg, **kw))


def cmd_gen_synthetic(args) -> int:
    setup = _setup(args)
    quotes = io.generate_quotes(setup)
    write_instruments(args.out, quotes.instruments)
    log.info("wrote %d instruments to %s (config %s)", len(quotes), args.out, setup.config_hash)
    return EXIT_OK


def _print_table(rows):
    print(f"{'kind':5} {'days':>5} {'strike':>10} {'mkt price':>14} {'mkt IV':>8} {'model price':>14} {'model IV':>8} {'IV err':>9}")
    for r in rows:
        print(f"{r['kind']:5} {r['maturity_days']:5d} {r['strike']:10.4g} {r['market_price']:14.6g} {r['market_iv']:8.4f} "
              f"{r['model_price']:14.6g} {r['model_iv']:8.4f} {r['iv_error']:9.1e}")


def cmd_calibrate(args) -> int:
    setup = _setup(args, calib=True)
    quotes = io.load_quotes(setup, args.instruments, unit_weights=args.unit_weights)
    grid = setup.grid_for(quotes.instruments)
    ref = setup.reference_for(grid)
    rate = setup.rate(grid)
    res = calibrate(setup.calibration, quotes, ref, grid, rate, setup.x0)
    io.save_result(args.out, res, setup, quotes, grid, export_every_days=args.export_every)
    _print_table(io.iv_table(quotes, res))
    status = "calibrated" if res.converged else "NOT calibrated"
    print(f"{status}: max|grad| = {res.grad_norm:.3e} (eps1 {setup.calibration.eps1:g}), "
          f"{res.n_evals} dual evaluations, {res.wall_time:.1f}s, config {setup.config_hash}")
    return EXIT_OK if res.converged else EXIT_FAIL


def cmd_validate_mc(args) -> int:
    setup = _setup(args)
    res, meta = io.load_result(args.result)
    grid = meta["grid"]
    if tuple(meta["x0"]) != tuple(setup.x0):
        log.warning("initial state of the config differs from the result's; using the result's")
    x0 = tuple(meta["x0"])
    quotes = io.load_quotes(setup, Path(args.result) / "instruments.csv")
    rate = setup.rate(grid)
    adi = reprice(res.surfaces, quotes, grid, rate, x0)
    est, se = mc_prices(res.surfaces, grid, x0, quotes.instruments, setup.mc, discount=setup.discounting)
    ok = True
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "maturity_days", "strike", "adi_price", "mc_price", "mc_se", "z_score"])
        for q, a, e, s in zip(quotes.instruments, adi, est, se):
            zsc = (e - a) / s if s > 0 else (0.0 if e == a else np.inf)
            ok &= abs(zsc) <= args.n_se
            w.writerow([q.kind.value, q.maturity_days, repr(q.strike), repr(float(a)), repr(float(e)), repr(float(s)),
                        repr(float(zsc))])
        fh.write(f"# config_hash={setup.config_hash} result_config_hash={meta['config_hash']} "
                 f"paths={setup.mc.n_paths} seed={setup.mc.seed}\n")
    if args.paths_out:
        n_keep = setup.keep_paths or 20
        ens = simulate_paths(res.surfaces, grid, x0, McConfig(n_paths=max(2 * n_keep, 2), seed=setup.mc.seed,
                             substeps=setup.mc.substeps), grid.n_steps, discount=setup.discounting, keep_paths=n_keep)
        write_paths_csv(args.paths_out, ens, grid)
    print(f"Monte Carlo {'agrees' if ok else 'DISAGREES'} with ADI within {args.n_se:g} SE for all {len(quotes)} instruments")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_compare(args) -> int:
    a, meta = io.load_result(args.result_a)
    grid = meta["grid"]
    if args.generating:
        if not args.config:
            raise io.ConfigError("--generating needs --config")
        setup = io.build_setup(io.load_config(args.config))
        if setup.grid.shape != grid.shape:
            raise io.ConfigError("config grid differs from the result grid")
        b = setup.surfaces("generating", grid)
    elif args.result_b:
        rb, meta_b = io.load_result(args.result_b)
        if meta_b["grid"] != grid:
            raise io.ConfigError("results live on different grids")
        b = rb.surfaces
    else:
        raise io.ConfigError("compare needs RESULT_B or --generating")
    steps = io.export_steps(max(a.surfaces.n_t, b.n_t), grid, args.export_every)
    d = io.write_difference_csv(args.out, a.surfaces, b, grid, steps)
    for f in ("alpha1", "alpha2", "beta11", "beta12", "beta22"):
        print(f"max |d{f}| = {float(np.max(np.abs(getattr(d, f)))):.3e}")
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "calibrate": cmd_calibrate,
    "validate-mc": cmd_validate_mc,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (io.ConfigError, QuoteRejected, FileNotFoundError, ValueError) as exc:
        print(f"sotcal: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
