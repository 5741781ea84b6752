"""Random dual-derivative inputs for the optimiser/oracle comparison."""
from __future__ import annotations

import numpy as np

from sotcal.optimisers import Bounds, Characteristics, DualDerivatives, Variant, optimal

RATES_BOUNDS = Bounds(0.05, 1.0, 4.0, 64.0)
LSV_BOUNDS = Bounds(0.01, 2.0, 1e-4, 1.0)


def draw(rng: np.random.Generator, variant: Variant):
    """One node's inputs: ``(d, ref, bounds, lsv_xi, lsv_v)``."""
    variant = Variant.parse(variant)
    if variant is Variant.LSV:
        v = rng.uniform(0.02, 1.0)
        xi = rng.uniform(0.1, 0.5)
        b11 = rng.uniform(0.5, 1.5) * v
        b22 = xi**2 * v
        rho = rng.uniform(-0.9, 0.9)
        ref = Characteristics(-0.5 * b11, rng.normal(0, 0.5), b11, rho * np.sqrt(b11 * b22), b22)
        d = DualDerivatives(rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.5),
                            rng.normal(0, 0.5), 0.0)
        return d, ref, LSV_BOUNDS, xi, v
    b11 = rng.uniform(0.1, 0.8)
    b22 = rng.uniform(8.0, 30.0)
    rho = rng.uniform(-0.9, 0.9)
    r = rng.uniform(0.0, 0.05)
    ref = Characteristics(r - 0.5 * b11, rng.normal(0, 1), b11, rho * np.sqrt(b11 * b22), b22)
    d = DualDerivatives(rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 2), rng.normal(0, 5), r)
    return d, ref, RATES_BOUNDS, None, None


def strict_draws(seed: int, variant, count: int):
    """``count`` draws whose closed-form maximiser is strictly interior."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        d, ref, bounds, xi, v = draw(rng, variant)
        c, strict, _ = optimal(variant, d, ref, bounds, lsv_xi=xi, lsv_v=v)
        if not bool(strict):
            continue
        out.append((d, ref, bounds, xi, v, c))
    return out
