"""Monte Carlo simulation of a model given by characteristic surfaces.

Paths of ``dX = alpha dt + beta^{1/2} dW`` are generated by Euler-Maruyama
with the coefficients interpolated bilinearly in space and held constant
over each grid time step.  The matrix square root is the lower Cholesky factor of the
interpolated 2x2 ``beta``; nodes where interpolation breaks positive
semidefiniteness get ``beta12`` clamped to the band (and are counted).
Paths that leave the truncated grid are reflected back into it.

Random numbers come from a counter-based generator (Philox) keyed by the
seed and the index of a fixed-size block of paths, so results do not depend
on how blocks are distributed over workers.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid
from .instruments import Instrument, payoff
from .pde import ModelSurfaces

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 100_000
    seed: int = 12345
    substeps: int = 4               # Euler steps per grid time step
    antithetic: bool = True
    block_size: int = 8192          # paths per random stream
    workers: int = 1
    reflect: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if self.substeps < 1 or self.block_size < 2:
            raise ValueError("substeps >= 1 and block_size >= 2 required")
        if self.antithetic and self.block_size % 2:
            raise ValueError("antithetic sampling needs an even block size")


@dataclass
class PathEnsemble:
    """States of all paths at the recorded time steps.

    ``states[k]`` is ``(z, r_scaled, int_r)`` with ``int_r`` the running
    integral of the unscaled short rate.  ``pair`` labels antithetic pairs
    so that standard errors can be computed on pair means.
    """

    states: dict
    pair: np.ndarray
    reflections: int = 0
    psd_repairs: int = 0
    trajectories: np.ndarray | None = None      # (n_keep, n_steps + 1, 2)
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.pair.size


def _stack(c) -> np.ndarray:
    return np.stack([np.asarray(v, dtype=float) for v in c], axis=-1)


def _simulate_block(block: int, n: int, fields: list, grid: Grid, x0, cfg: McConfig, record: set,
                    rate_scale: float, discount: bool, n_steps: int, n_keep: int):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(block,))))
    z = np.full(n, float(x0[0]))
    r = np.full(n, float(x0[1]))
    ir = np.zeros(n)
    h = grid.dt / cfg.substeps
    sq = math.sqrt(h)
    refl = 0
    repairs = 0
    out = {}
    keep = np.empty((n_keep, n_steps + 1, 2)) if n_keep else None
    if keep is not None:
        keep[:, 0, 0], keep[:, 0, 1] = z[:n_keep], r[:n_keep]
    if 0 in record:
        out[0] = (z.copy(), r.copy(), ir.copy())
    half = n // 2
    for k in range(n_steps):
        F = fields[min(k, len(fields) - 1)]
        for _ in range(cfg.substeps):
            c = grid.interpolate(F, z, r)
            a1, a2, b11, b12, b22 = (c[:, j] for j in range(5))
            b11 = np.maximum(b11, 0.0)
            b22 = np.maximum(b22, 0.0)
            band = np.sqrt(b11 * b22)
            bad = np.abs(b12) > band
            if bad.any():
                repairs += int(np.count_nonzero(bad))
                b12 = np.clip(b12, -band, band)
            l11 = np.sqrt(b11)
            l21 = np.divide(b12, l11, out=np.zeros_like(b12), where=l11 > 0)
            l22 = np.sqrt(np.maximum(b22 - l21**2, 0.0))
            if cfg.antithetic:
                g = rng.standard_normal((2, half))
                g = np.concatenate([g, -g], axis=1)
            else:
                g = rng.standard_normal((2, n))
            if discount:
                ir += (r / rate_scale) * h
            z = z + a1 * h + l11 * sq * g[0]
            r = r + a2 * h + sq * (l21 * g[0] + l22 * g[1])
            if cfg.reflect:
                for x, lo, hi in ((z, grid.z_min, grid.z_max), (r, grid.r_min, grid.r_max)):
                    lo_hit = x < lo
                    hi_hit = x > hi
                    refl += int(np.count_nonzero(lo_hit) + np.count_nonzero(hi_hit))
                    x[lo_hit] = 2 * lo - x[lo_hit]
                    x[hi_hit] = 2 * hi - x[hi_hit]
                    np.clip(x, lo, hi, out=x)
        if keep is not None:
            keep[:, k + 1, 0], keep[:, k + 1, 1] = z[:n_keep], r[:n_keep]
        if k + 1 in record:
            out[k + 1] = (z.copy(), r.copy(), ir.copy())
    return out, refl, repairs, keep


def simulate_paths(surfaces: ModelSurfaces, grid: Grid, x0, cfg: McConfig, n_steps: int, record_steps=None,
                   discount: bool = True, keep_paths: int = 0) -> PathEnsemble:
    """Simulate ``cfg.n_paths`` paths over ``n_steps`` time steps of the grid.

    ``record_steps`` (default: the last step) selects the steps whose states
    are kept for all paths; ``keep_paths`` full trajectories of the
    first paths are stored for export.  ``discount=False`` skips the rate
    integral (models without a short-rate factor).
    """
    if not grid.contains(*x0):
        raise ValueError(f"initial state {x0} outside the grid")
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    for name in ("beta11", "beta22"):
        if np.any(getattr(surfaces, name) < 0):
            raise ValueError(f"negative {name} in surfaces")
    record = set(int(d) for d in ([n_steps] if record_steps is None else record_steps))
    if any(d < 0 or d > n_steps for d in record):
        raise ValueError("record step outside the simulated horizon")
    fields = [_stack(surfaces.at(k)) for k in range(min(surfaces.n_t, n_steps))]
    blocks = []
    left = cfg.n_paths
    while left > 0:
        m = min(cfg.block_size, left)
        if cfg.antithetic and m % 2:
            m += 1
        blocks.append(m)
        left -= m

    def job(b):
        return _simulate_block(b, blocks[b], fields, grid, x0, cfg, record, surfaces.rate_scale, discount, n_steps, 0)

    jobs = range(len(blocks))
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(job, jobs))
    else:
        results = [job(b) for b in jobs]
    if keep_paths:
        # trajectories of the first paths are regenerated from the first block's stream
        _, _, _, traj = _simulate_block(0, blocks[0], fields, grid, x0, cfg, set(), surfaces.rate_scale,
                                        discount, n_steps, min(keep_paths, blocks[0]))
    else:
        traj = None
    states = {}
    for d in sorted(record):
        states[d] = tuple(np.concatenate([res[0][d][k] for res in results]) for k in range(3))
    pair = []
    offset = 0
    for m in blocks:
        ids = np.arange(m) % (m // 2) if cfg.antithetic else np.arange(m)
        pair.append(offset + ids)
        offset += m // 2 if cfg.antithetic else m
    refl = sum(res[1] for res in results)
    repairs = sum(res[2] for res in results)
    if refl:
        log.info("reflected %d path steps at the domain boundary", refl)
    if repairs:
        log.info("repaired %d non-PSD interpolated diffusion matrices", repairs)
    return PathEnsemble(states=states, pair=np.concatenate(pair), reflections=refl, psd_repairs=repairs,
                        trajectories=traj, meta={"n_steps": n_steps, "rate_scale": surfaces.rate_scale})


def _mean_se(values: np.ndarray, pair: np.ndarray) -> tuple[float, float]:
    groups = np.bincount(pair)
    means = np.bincount(pair, weights=values) / groups
    m = float(means.mean())
    se = float(means.std(ddof=1) / math.sqrt(means.size)) if means.size > 1 else float("nan")
    return m, se


def discounted_payoffs(ens: PathEnsemble, instr: Instrument, grid: Grid, rate_scale: float) -> np.ndarray:
    (step,) = grid.steps_of_days(instr.maturity_days)
    z, r, ir = ens.states[int(step)]
    return np.exp(-ir) * payoff(instr, z, r, rate_scale, grid)


def mc_price(surfaces: ModelSurfaces, grid: Grid, x0, instr: Instrument, cfg: McConfig,
             discount: bool = True, rate_scale: float | None = None) -> tuple[float, float]:
    """Discounted-payoff mean and its standard error for one instrument."""
    est, se = mc_prices(surfaces, grid, x0, [instr], cfg, discount, rate_scale)
    return float(est[0]), float(se[0])


def mc_prices(surfaces: ModelSurfaces, grid: Grid, x0, instruments, cfg: McConfig, discount: bool = True,
              rate_scale: float | None = None):
    """Prices and standard errors of several instruments from one path set."""
    instruments = list(instruments)
    R = surfaces.rate_scale if rate_scale is None else rate_scale
    steps = sorted({int(k) for k in grid.steps_of_days([q.maturity_days for q in instruments])})
    ens = simulate_paths(surfaces, grid, x0, cfg, max(steps), record_steps=steps, discount=discount)
    est, se = [], []
    for q in instruments:
        m, s = _mean_se(discounted_payoffs(ens, q, grid, R), ens.pair)
        est.append(m)
        se.append(s)
    return np.array(est), np.array(se)


def write_paths_csv(path, ens: PathEnsemble, grid: Grid) -> None:
    """Trajectories as ``path,t_days,z,r_unscaled`` rows."""
    if ens.trajectories is None:
        raise ValueError("no trajectories stored; simulate with keep_paths > 0")
    R = ens.meta.get("rate_scale", 1.0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "t_days", "z", "r_unscaled"])
        for p, traj in enumerate(ens.trajectories):
            for k, (z, r) in enumerate(traj):
                w.writerow([p, repr(k * grid.dt_days), repr(float(z)), repr(float(r / R))])
