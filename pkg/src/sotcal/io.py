"""Run configuration, result files and surface exports.

A run is described by one JSON document (see ``data/config.schema.json``
for fields and units).  ``build_setup`` turns it into the grid, models and
calibration settings; results are written as

    result.json     scalars, per-instrument table, diagnostics, config hash
    surfaces.npz    calibrated and reference surfaces (exact round trip)
    instruments.csv the quotes that were calibrated to
    ivs.csv         market vs model prices and implied vols
    surfaces.csv    unscaled surfaces for plotting
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .dual import CalibrationConfig, CalibrationResult
from .grid import Grid
from .instruments import Instrument, Kind, QuoteSet, prepare_quotes, read_instruments, write_instruments
from .mc import McConfig
from .optimisers import Bounds, Variant
from .pde import ModelSurfaces
from .reference_models import (
    HestonParams, characteristics, params_from_dict, price_quotes, sequential_reference,
)

log = logging.getLogger(__name__)

SURFACE_HEADER = ["t_days", "z", "r_unscaled", "alpha1", "alpha2", "beta11", "beta12", "beta22", "rho"]
RESULT_FORMAT = 1


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    return json.loads(resources.files("sotcal").joinpath("data/config.schema.json").read_text())


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    cal = cfg.get("calibration", {})
    if cfg["market"] == "lsv" and cal.get("variant", "lsv") != "lsv":
        raise ConfigError("the 'lsv' market supports only the lsv variant")
    if cfg["market"] == "rates" and cal.get("variant") == "lsv":
        raise ConfigError("the lsv variant needs market 'lsv'")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = validate_config(cfg)
    # relative paths inside the config are relative to the config file
    ref = cfg.get("reference", {})
    if "surfaces" in ref and not Path(ref["surfaces"]).is_absolute():
        cfg = json.loads(json.dumps(cfg))
        cfg["reference"]["surfaces"] = str((Path(path).parent / ref["surfaces"]).resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def apply_overrides(cfg: dict, grid=None, dt_days=None, variant=None, eps1=None, eps2=None, bounds=None,
                    smoothing_iters=None, seed=None, n_paths=None) -> dict:
    """Copy of ``cfg`` with command-line overrides applied (then re-validated)."""
    out = json.loads(json.dumps(cfg))
    if grid is not None:
        nz, nr = (int(v) for v in str(grid).split(","))
        out["grid"].update(nz=nz, nr=nr)
    if dt_days is not None:
        out["grid"]["dt_days"] = float(dt_days)
    cal = out.setdefault("calibration", {})
    if variant is not None:
        cal["variant"] = Variant.parse(variant).value
    if eps1 is not None:
        cal["eps1"] = float(eps1)
    if eps2 is not None:
        cal["eps2"] = float(eps2)
    if bounds is not None:
        cal["bounds"] = [float(v) for v in str(bounds).split(",")] if isinstance(bounds, str) else list(bounds)
    if smoothing_iters is not None:
        cal["smoothing_iters"] = int(smoothing_iters)
        cal["min_smoothing_iters"] = min(cal.get("min_smoothing_iters", 0), int(smoothing_iters))
    mc = out.setdefault("mc", {})
    if seed is not None:
        mc["seed"] = int(seed)
    if n_paths is not None:
        mc["n_paths"] = int(n_paths)
    if not cal:
        out.pop("calibration")
    if not mc:
        out.pop("mc")
    return validate_config(out)


# --------------------------------------------------------------------------
# run setup


@dataclass
class RunSetup:
    config: dict
    config_hash: str
    market: str
    rate_scale: float
    x0: tuple[float, float]
    grid: Grid                 # n_steps = 0 until maturities are known
    calibration: CalibrationConfig
    mc: McConfig
    keep_paths: int = 0

    @property
    def discounting(self) -> bool:
        return self.market == "rates"

    def quote_set(self, instruments) -> QuoteSet:
        c = self.config
        return QuoteSet(
            instruments=tuple(instruments), spot=float(c["initial"]["spot"]),
            short_rate=float(c["initial"]["state2"]) if self.discounting else 0.0,
            rate_scale=self.rate_scale, iv_basis=float(c.get("iv_basis_days", 360.0)),
            cap_model=c.get("cap_model", "normal"),
        )

    def grid_for(self, instruments) -> Grid:
        steps = self.grid.steps_of_days([q.maturity_days for q in instruments])
        return self.grid.with_steps(int(steps.max()))

    def model(self, key: str):
        if key not in self.config:
            raise ConfigError(f"config has no '{key}' model")
        return params_from_dict(self.config[key])

    def rate(self, grid: Grid) -> np.ndarray:
        if not self.discounting:
            return np.zeros(grid.shape)
        _, Rs = grid.mesh()
        return Rs / self.rate_scale

    def surfaces(self, key: str, grid: Grid) -> ModelSurfaces:
        """Characteristics of the ``generating`` or ``reference`` entry on ``grid``."""
        entry = self.config.get(key)
        if entry is None:
            raise ConfigError(f"config has no '{key}' entry")
        if "surfaces" in entry:
            s = load_surfaces(entry["surfaces"])
            if s.alpha1.shape[1:] != grid.shape:
                raise ConfigError(f"{entry['surfaces']}: surfaces on a {s.alpha1.shape[1:]} grid, run grid is {grid.shape}")
            return s
        p = params_from_dict(entry)
        if isinstance(p, HestonParams) != (self.market == "lsv"):
            raise ConfigError(f"{key} family '{entry['family']}' does not match market '{self.market}'")
        return characteristics(p, grid, self.rate_scale)

    def reference_for(self, grid: Grid) -> ModelSurfaces:
        ref = self.surfaces("reference", grid)
        if self.calibration.variant is Variant.SEQ:
            rho_ref = self.config.get("calibration", {}).get("rho_ref")
            if rho_ref is None:
                raise ConfigError("the seq variant needs calibration.rho_ref in the config")
            ref = sequential_reference(ref, rho_ref)
        return ref


def build_setup(cfg: dict) -> RunSetup:
    cfg = validate_config(cfg)
    market = cfg["market"]
    R = float(cfg.get("rate_scale", 100.0)) if market == "rates" else 1.0
    spot = float(cfg["initial"]["spot"])
    s2 = float(cfg["initial"]["state2"])
    x0 = (math.log(spot), s2 * R)
    g = cfg["grid"]
    hw = float(g.get("z_halfwidth", 1.2))
    z_lo = float(g.get("z_min", x0[0] - hw))
    z_hi = float(g.get("z_max", x0[0] + hw))
    if market == "rates":
        r_lo, r_hi = float(g.get("r_min", -0.05)), float(g.get("r_max", 0.10))
    else:
        r_lo, r_hi = float(g.get("r_min", 0.0)), float(g.get("r_max", max(1.0, 4.0 * s2)))
    if not (z_lo < x0[0] < z_hi and r_lo < s2 < r_hi):
        raise ConfigError("the initial state must lie strictly inside the grid bounds")
    dt = float(g.get("dt_days", 1.0)) / 365.0
    grid = Grid.around(x0, z_lo, z_hi, r_lo * R, r_hi * R, int(g["nz"]), int(g["nr"]), dt=dt)
    c = dict(cfg.get("calibration", {}))
    variant = Variant.parse(c.get("variant", "lsv" if market == "lsv" else "joint"))
    default_bounds = [0.05, 1.0, 4.0, 64.0] if market == "rates" else [0.01, 2.0, 1e-4, 1.0]
    cal = CalibrationConfig(
        variant=variant, eps1=float(c.get("eps1", 1e-4)), eps2=float(c.get("eps2", 1e-8)),
        bounds=Bounds(*c.get("bounds", default_bounds)), rate_scale=R,
        max_evals=int(c.get("max_evals", 150)), smoothing_iters=int(c.get("smoothing_iters", 0)),
        min_smoothing_iters=int(c.get("min_smoothing_iters", 0)),
        smoothing_sigma=float(c.get("smoothing_sigma", 1.0)), smoothing_radius=int(c.get("smoothing_radius", 2)),
        warm_start=bool(c.get("warm_start", False)), p=float(c.get("p", 4.0)), theta=float(c.get("theta", 0.5)),
    )
    m = cfg.get("mc", {})
    mc = McConfig(n_paths=int(m.get("n_paths", 100_000)), seed=int(m.get("seed", 12345)),
                  substeps=int(m.get("substeps", 4)), antithetic=bool(m.get("antithetic", True)))
    return RunSetup(config=cfg, config_hash=config_hash(cfg), market=market, rate_scale=R, x0=x0, grid=grid,
                    calibration=cal, mc=mc, keep_paths=int(m.get("keep_paths", 0)))


# --------------------------------------------------------------------------
# synthetic quotes


def synthetic_instruments(setup: RunSetup) -> list[Instrument]:
    spec = setup.config.get("instruments")
    if not spec:
        raise ConfigError("config has no 'instruments' section")
    out = []
    for key, kind in (("calls", Kind.CALL), ("caps", Kind.CAP)):
        strip = spec.get(key)
        if strip is None:
            continue
        if kind is Kind.CAP and not setup.discounting:
            raise ConfigError("caps need market 'rates'")
        if not strip["strikes"]:
            raise ConfigError(f"{key}: empty strike list")
        notional = float(strip.get("notional", 1.0))
        for d in strip["maturities_days"]:
            for k in strip["strikes"]:
                out.append(Instrument(kind, int(d), float(k), notional if kind is Kind.CAP else 1.0))
    if not out:
        raise ConfigError("no instruments requested")
    order = {Kind.CALL: 0, Kind.CAP: 1}
    return sorted(out, key=lambda q: (q.maturity_days, order[q.kind]))


def generate_quotes(setup: RunSetup) -> QuoteSet:
    """Price the configured instruments under the generating model (ADI)."""
    instruments = synthetic_instruments(setup)
    grid = setup.grid_for(instruments)
    quotes = setup.quote_set(instruments)
    surf = setup.surfaces("generating", grid)
    prices = price_quotes(surf, quotes, grid, setup.rate(grid), setup.x0)
    priced = quotes.with_instruments([replace(q, price=float(p)) for q, p in zip(instruments, prices)])
    return prepare_quotes(priced)


def load_quotes(setup: RunSetup, path, unit_weights: bool = False) -> QuoteSet:
    instruments = read_instruments(path)
    if not setup.discounting and any(q.kind is Kind.CAP for q in instruments):
        raise ConfigError("caps need market 'rates'")
    return prepare_quotes(setup.quote_set(instruments), unit_weights=unit_weights)


# --------------------------------------------------------------------------
# surfaces


def save_surfaces(path, surfaces: ModelSurfaces, **extra) -> None:
    arrays = {f: getattr(surfaces, f) for f in ("alpha1", "alpha2", "beta11", "beta12", "beta22")}
    np.savez_compressed(path, rate_scale=np.float64(surfaces.rate_scale), **arrays, **extra)


def load_surfaces(path, prefix: str = "") -> ModelSurfaces:
    p = Path(path)
    if p.is_dir():
        p = p / "surfaces.npz"
    with np.load(p) as z:
        return ModelSurfaces(*(z[prefix + f] for f in ("alpha1", "alpha2", "beta11", "beta12", "beta22")),
                             rate_scale=float(z[prefix + "rate_scale"] if prefix + "rate_scale" in z else z["rate_scale"]))


def surface_rows(surfaces: ModelSurfaces, grid: Grid, steps=None):
    """Rows of the unscaled surface table (rate scaling undone)."""
    R = surfaces.rate_scale
    Z, Rs = grid.mesh()
    steps = range(surfaces.n_t) if steps is None else steps
    rho = surfaces.correlation()
    for k in steps:
        t = k * grid.dt_days
        c = surfaces.at(k)
        cols = [Z, Rs / R, c.alpha1, c.alpha2 / R, c.beta11, c.beta12 / R, c.beta22 / R**2, rho[min(k, surfaces.n_t - 1)]]
        flat = [np.ravel(np.broadcast_to(x, grid.shape), order="F") for x in cols]
        for vals in zip(*flat):
            yield [repr(float(t))] + [repr(float(v)) for v in vals]


def write_surfaces_csv(path, surfaces: ModelSurfaces, grid: Grid, steps=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURFACE_HEADER)
        w.writerows(surface_rows(surfaces, grid, steps))


def export_steps(n_t: int, grid: Grid, every_days: float, maturities_days=()) -> list[int]:
    """Time steps for CSV export: every ``every_days`` plus the step before each maturity."""
    if every_days <= 0:
        return list(range(n_t))
    stride = max(1, int(round(every_days / grid.dt_days)))
    steps = set(range(0, n_t, stride))
    for d in maturities_days:
        k = int(round(d / grid.dt_days)) - 1
        if 0 <= k < n_t:
            steps.add(k)
    return sorted(steps)


def surface_difference(a: ModelSurfaces, b: ModelSurfaces) -> ModelSurfaces:
    """Node-wise ``a - b`` (the shorter time axis is extended with its last slice)."""
    if a.alpha1.shape[1:] != b.alpha1.shape[1:]:
        raise ValueError(f"grid mismatch: {a.alpha1.shape[1:]} vs {b.alpha1.shape[1:]}")
    if a.rate_scale != b.rate_scale:
        raise ValueError("rate scales differ")
    n = max(a.n_t, b.n_t)
    idx = np.arange(n)

    def ext(s, f):
        arr = getattr(s, f)
        return arr[np.minimum(idx, arr.shape[0] - 1)]

    names = ("alpha1", "alpha2", "beta11", "beta12", "beta22")
    return ModelSurfaces(*(ext(a, f) - ext(b, f) for f in names), rate_scale=a.rate_scale)


def write_difference_csv(path, a: ModelSurfaces, b: ModelSurfaces, grid: Grid, steps=None) -> ModelSurfaces:
    """Write node-wise differences of the unscaled surfaces (``rho`` column: rho_a - rho_b)."""
    d = surface_difference(a, b)
    n = d.n_t
    idx = np.arange(n)
    rho = a.correlation()[np.minimum(idx, a.n_t - 1)] - b.correlation()[np.minimum(idx, b.n_t - 1)]
    R = d.rate_scale
    Z, Rs = grid.mesh()
    steps = range(n) if steps is None else steps
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURFACE_HEADER)
        for k in steps:
            c = d.at(k)
            cols = [Z, Rs / R, c.alpha1, c.alpha2 / R, c.beta11, c.beta12 / R, c.beta22 / R**2, rho[k]]
            flat = [np.ravel(np.broadcast_to(x, grid.shape), order="F") for x in cols]
            for vals in zip(*flat):
                w.writerow([repr(float(k * grid.dt_days))] + [repr(float(v)) for v in vals])
    return d


# --------------------------------------------------------------------------
# results

_ARRAY_FIELDS = ("lam", "scaled_prices", "prices", "ivs", "market_ivs", "inner_iterations")
_LIST_FIELDS = ("grad_history", "value_history", "smoothing_log")
_SCALAR_FIELDS = ("value", "grad_norm", "converged", "n_evals", "wall_time", "smoothed_output", "message",
                  "strict_violations", "contraction_violations")


def iv_table(quotes: QuoteSet, result: CalibrationResult) -> list[dict]:
    rows = []
    for i, q in enumerate(quotes.instruments):
        rows.append({
            "kind": q.kind.value, "maturity_days": q.maturity_days, "strike": q.strike,
            "market_price": q.price, "market_iv": float(result.market_ivs[i]),
            "model_price": float(result.prices[i]), "model_iv": float(result.ivs[i]),
            "iv_error": float(result.ivs[i] - result.market_ivs[i]),
            "scaled_error": float(result.scaled_prices[i] - quotes.scaled_prices[i]),
        })
    return rows


def save_result(outdir, result: CalibrationResult, setup: RunSetup, quotes: QuoteSet, grid: Grid,
                export_every_days: float = 0.0) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": RESULT_FORMAT,
        "config_hash": setup.config_hash,
        "config": setup.config,
        "variant": result.variant.value,
        "grid": asdict(grid),
        "x0": list(setup.x0),
        "instruments": iv_table(quotes, result),
    }
    for f in _ARRAY_FIELDS:
        v = getattr(result, f)
        doc[f] = None if v is None else np.asarray(v).tolist()
    for f in _LIST_FIELDS + _SCALAR_FIELDS:
        doc[f] = getattr(result, f)
    with open(out / "result.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    s, r = result.surfaces, result.reference
    save_surfaces(out / "surfaces.npz", s,
                  **{"ref_" + f: getattr(r, f) for f in ("alpha1", "alpha2", "beta11", "beta12", "beta22")},
                  ref_rate_scale=np.float64(r.rate_scale))
    write_instruments(out / "instruments.csv", quotes.instruments)
    with open(out / "ivs.csv", "w", newline="") as fh:
        rows = iv_table(quotes, result)
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        fh.write(f"# config_hash={setup.config_hash}\n")
    steps = export_steps(s.n_t, grid, export_every_days, quotes.maturity_days)
    write_surfaces_csv(out / "surfaces.csv", s, grid, steps)
    return out


def load_result(outdir) -> tuple[CalibrationResult, dict]:
    """Reload a result directory; returns ``(result, metadata)``."""
    out = Path(outdir)
    with open(out / "result.json") as fh:
        doc = json.load(fh)
    if doc.get("format") != RESULT_FORMAT:
        raise ValueError(f"{out}: unsupported result format {doc.get('format')}")
    surfaces = load_surfaces(out / "surfaces.npz")
    reference = load_surfaces(out / "surfaces.npz", prefix="ref_")
    kw = {}
    for f in _ARRAY_FIELDS:
        v = doc[f]
        kw[f] = None if v is None else np.asarray(v, dtype=int if f == "inner_iterations" else float)
    for f in _LIST_FIELDS + _SCALAR_FIELDS:
        kw[f] = doc[f]
    res = CalibrationResult(surfaces=surfaces, reference=reference, variant=Variant.parse(doc["variant"]), **kw)
    meta = {k: doc[k] for k in ("config_hash", "config", "grid", "x0", "instruments")}
    meta["grid"] = Grid(**meta["grid"])
    return res, meta


def results_equal(a: CalibrationResult, b: CalibrationResult) -> bool:
    for f in fields(CalibrationResult):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, ModelSurfaces):
            if not x.equals(y):
                return False
        elif isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if x is None or y is None or not np.array_equal(np.asarray(x), np.asarray(y), equal_nan=True):
                return False
        elif isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        elif x != y:
            return False
    return True
