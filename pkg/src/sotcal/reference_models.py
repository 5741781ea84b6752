"""Parametric reference families and their characteristics on the grid.

Rates enter the grid rescaled by ``R`` (``r_s = R r``) so the rate drift and
the rate entries of the diffusion matrix carry factors ``R`` and ``R**2``.
For the Heston family the second coordinate is the variance ``v`` and no
rescaling is applied.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import minimize

from .grid import Grid
from .instruments import QuoteSet, payoff_on_grid
from .optimisers import Characteristics
from .pde import ModelSurfaces, adi_forward_price

log = logging.getLogger(__name__)


def _check_corr(rho):
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"correlation {rho} outside [-1, 1]")


@dataclass(frozen=True)
class CevVasicekParams:
    sigma: float
    gamma: float
    rho: float
    sigma_r: float
    a: float
    b: float

    def __post_init__(self):
        if min(self.sigma, self.sigma_r, self.a, self.b) <= 0:
            raise ValueError("sigma, sigma_r, a and b must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        _check_corr(self.rho)


@dataclass(frozen=True)
class HullWhiteCevParams:
    """CEV stock with Hull-White short rate; ``b(t)`` fitted to a flat start."""

    sigma: float
    gamma: float
    rho: float
    sigma_r: float
    a: float
    r0: float

    def __post_init__(self):
        if min(self.sigma, self.sigma_r, self.a) <= 0:
            raise ValueError("sigma, sigma_r and a must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        _check_corr(self.rho)

    def b(self, t):
        """``b(t) = a r0 + sigma_r^2 / (2a) (1 - exp(-2 a t))`` in unscaled rate units."""
        return self.a * self.r0 + self.sigma_r**2 / (2 * self.a) * (1 - np.exp(-2 * self.a * np.asarray(t, dtype=float)))


@dataclass(frozen=True)
class HestonParams:
    kappa: float
    theta: float
    xi: float
    rho: float

    def __post_init__(self):
        if min(self.kappa, self.theta, self.xi) <= 0:
            raise ValueError("kappa, theta and xi must be positive")
        _check_corr(self.rho)


FAMILIES = {
    "cev_vasicek": CevVasicekParams,
    "hw_cev": HullWhiteCevParams,
    "heston": HestonParams,
}


def params_to_dict(p) -> dict:
    return {"family": family_of(p), "params": asdict(p)}


def params_from_dict(d: dict):
    cls = FAMILIES[d["family"]]
    return cls(**{k: float(v) for k, v in d["params"].items()})


def family_of(p) -> str:
    for name, cls in FAMILIES.items():
        if isinstance(p, cls):
            return name
    raise TypeError(f"unknown parameter set {p!r}")


# --------------------------------------------------------------------------
# characteristics


def _cev_part(sigma, gamma, Z):
    vol = sigma * np.exp((gamma - 1.0) * Z)
    return vol, vol**2


def characteristics_cev_vasicek(p: CevVasicekParams, grid: Grid, R: float = 100.0) -> ModelSurfaces:
    Z, Rs = grid.mesh()
    vol, b11 = _cev_part(p.sigma, p.gamma, Z)
    c = Characteristics(
        alpha1=Rs / R - 0.5 * b11,
        alpha2=R * p.a * (p.b - Rs / R),
        beta11=b11,
        beta12=R * p.rho * p.sigma_r * vol,
        beta22=np.full(grid.shape, R**2 * p.sigma_r**2),
    )
    s = ModelSurfaces.from_characteristics(c, grid, R)
    s.check()
    return s


def characteristics_hw_cev(p: HullWhiteCevParams, grid: Grid, R: float = 100.0, times=None) -> ModelSurfaces:
    """Surfaces at each time in ``times`` (default: the grid's step start times)."""
    if times is None:
        times = grid.dt * np.arange(max(grid.n_steps, 1))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    Z, Rs = grid.mesh()
    vol, b11 = _cev_part(p.sigma, p.gamma, Z)
    a1 = Rs / R - 0.5 * b11
    b12 = R * p.rho * p.sigma_r * vol
    b22 = np.full(grid.shape, R**2 * p.sigma_r**2)
    items = [Characteristics(a1, R * (p.b(t) - p.a * Rs / R), b11, b12, b22) for t in times]
    s = ModelSurfaces.stack(items, R)
    s.check()
    return s


def characteristics_heston(p: HestonParams, grid: Grid) -> ModelSurfaces:
    """Heston characteristics on the (z, v) plane (no rate, no rescaling)."""
    Z, V = grid.mesh()
    v = np.maximum(V, 0.0)
    c = Characteristics(
        alpha1=-0.5 * v,
        alpha2=p.kappa * (p.theta - V),
        beta11=v,
        beta12=p.rho * p.xi * v,
        beta22=p.xi**2 * v,
    )
    s = ModelSurfaces.from_characteristics(c, grid, 1.0)
    s.check()
    return s


def characteristics(p, grid: Grid, R: float = 100.0) -> ModelSurfaces:
    if isinstance(p, CevVasicekParams):
        return characteristics_cev_vasicek(p, grid, R)
    if isinstance(p, HullWhiteCevParams):
        return characteristics_hw_cev(p, grid, R)
    if isinstance(p, HestonParams):
        return characteristics_heston(p, grid)
    raise TypeError(f"unknown parameter set {p!r}")


def discount_rate(p, grid: Grid, R: float = 100.0) -> np.ndarray:
    """Unscaled short rate at each node (zero on the stochastic-volatility plane)."""
    if isinstance(p, HestonParams):
        return np.zeros(grid.shape)
    _, Rs = grid.mesh()
    return Rs / R


# --------------------------------------------------------------------------
# pricing and parametric calibration


def price_quotes(surfaces: ModelSurfaces, quotes: QuoteSet, grid: Grid, rate, x0) -> np.ndarray:
    """ADI prices (currency) of every instrument in ``quotes``."""
    pay = np.stack([payoff_on_grid(q, grid, quotes.rate_scale) for q in quotes.instruments])
    res = adi_forward_price(surfaces, pay, grid.steps_of_days(quotes.maturity_days), grid, rate, x0)
    return res.prices


_BOUNDS = {
    "sigma": (1e-4, 5.0), "gamma": (0.0, 3.0), "rho": (-1.0, 1.0), "sigma_r": (1e-5, 1.0),
    "a": (1e-4, 10.0), "b": (1e-5, 1.0), "r0": (None, None),
    "kappa": (1e-4, 20.0), "theta": (1e-4, 2.0), "xi": (1e-4, 3.0),
}


@dataclass
class ParametricFit:
    params: object
    objective: float
    converged: bool
    n_evals: int
    history: list


def parametric_calibrate(quotes: QuoteSet, init, grid: Grid, x0, free=None, rel_step: float = 1e-4,
                         gtol: float = 1e-3, max_iter: int = 100) -> ParametricFit:
    """Least-squares fit of a parametric family to vega-weighted prices.

    Minimises the mean squared difference of scaled prices (price / vega
    weight) with L-BFGS-B under box constraints; gradients are central
    differences with a relative step ``rel_step``.  ``free`` names the
    parameters to fit (others stay at ``init``).  On failure the best point
    seen is returned with ``converged = False`` and a warning.
    """
    cls = type(init)
    names = [f.name for f in fields(cls)]
    free = [n for n in names if n != "r0"] if free is None else list(free)
    R = quotes.rate_scale
    target = quotes.scaled_prices
    w = quotes.weights
    rate = discount_rate(init, grid, R)
    base = asdict(init)
    history = []
    best = {"f": math.inf, "x": None}

    def build(x):
        d = dict(base)
        d.update({n: float(v) for n, v in zip(free, x)})
        return cls(**d)

    def objective(x):
        p = build(x)
        model = price_quotes(characteristics(p, grid, R), quotes, grid, rate, x0) / w
        f = float(np.mean((model - target) ** 2))
        if f < best["f"]:
            best.update(f=f, x=np.array(x, dtype=float))
        return f

    lo = np.array([_BOUNDS[n][0] for n in free], dtype=float)
    hi = np.array([_BOUNDS[n][1] for n in free], dtype=float)

    def fun_and_grad(x):
        f0 = objective(x)
        g = np.zeros_like(x)
        for k in range(x.size):
            h = rel_step * max(abs(x[k]), 1e-3)
            xp, xm = x.copy(), x.copy()
            xp[k] = min(x[k] + h, hi[k])
            xm[k] = max(x[k] - h, lo[k])
            g[k] = (objective(xp) - objective(xm)) / (xp[k] - xm[k])
        history.append(f0)
        return f0, g

    x_init = np.array([base[n] for n in free], dtype=float)
    res = minimize(fun_and_grad, x_init, jac=True, method="L-BFGS-B",
                   bounds=list(zip(lo, hi)), options={"maxiter": max_iter, "gtol": gtol, "maxcor": 10})
    x_best = res.x if res.fun <= best["f"] else best["x"]
    ok = bool(res.success)
    if not ok:
        warnings.warn(f"parametric calibration did not converge: {res.message}", RuntimeWarning)
    return ParametricFit(params=build(x_best), objective=float(min(res.fun, best["f"])), converged=ok,
                         n_evals=int(res.nfev), history=history)


def sequential_reference(surfaces: ModelSurfaces, rho_ref="reference") -> ModelSurfaces:
    """Reference for the sequential variant, where ``beta12 = R rho_ref sigma_r^2`` is pinned.

    ``rho_ref = "reference"`` keeps the reference model's own cross term,
    i.e. ``rho_ref = rho_bar sigma_bar(z) / sigma_r``; a number gives a
    constant ``rho_ref``.  The barrier cost needs
    ``rho_ref^2 sigma_r^2 < beta11`` at every node.
    """
    out = surfaces.copy()
    if not (isinstance(rho_ref, str) and rho_ref == "reference"):
        rho = float(rho_ref)
        out.beta12 = rho * out.beta22 / out.rate_scale
    floor = out.beta12**2 / out.beta22
    if np.any(out.beta11 <= floor):
        raise ValueError("rho_ref too large: rho_ref^2 sigma_r^2 must stay below the reference variance")
    return out
