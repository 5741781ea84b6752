"""Node-wise maximisers of the dual bracket for each calibration variant.

At every grid node the HJB Hamiltonian needs

    sup_{(alpha, beta) in Gamma}  alpha . a + beta : b - F(alpha, beta)

with ``a = grad(phi)`` and ``b = hess(phi) / 2``.  The closed forms below
are vectorised over arrays of nodes.  ``lf_bruteforce`` evaluates the same
supremum directly from the definition of the cost and is used only as a test
oracle.

Variants
--------
joint      free alpha2, beta11, beta12, beta22 (bounded beta11, beta22)
seq        beta11 only; alpha2, beta12, beta22 pinned; barrier cost H
full_seq   beta11, beta12 free; alpha2, beta22 pinned
lsv        as full_seq on the (z, v) plane, with beta22 = xi^2 v and r = 0
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar


class Variant(str, Enum):
    JOINT = "joint"
    SEQ = "seq"
    FULL_SEQ = "full-seq"
    LSV = "lsv"

    @classmethod
    def parse(cls, text) -> "Variant":
        if isinstance(text, Variant):
            return text
        t = str(text).strip().lower().replace("_", "-")
        aliases = {"sequential": "seq", "full-sequential": "full-seq", "fullseq": "full-seq"}
        return cls(aliases.get(t, t))

    @property
    def pins_rates(self) -> bool:
        return self is not Variant.JOINT


@dataclass(frozen=True)
class Bounds:
    """Variance bounds in scaled units (beta22 carries the factor R**2)."""

    d11_lo: float = 0.05
    d11_hi: float = 1.0
    d22_lo: float = 4.0
    d22_hi: float = 64.0

    def __post_init__(self):
        if not (0 < self.d11_lo < self.d11_hi):
            raise ValueError("need 0 < d11_lo < d11_hi")
        if not (0 < self.d22_lo < self.d22_hi):
            raise ValueError("need 0 < d22_lo < d22_hi")

    @classmethod
    def parse(cls, text: str) -> "Bounds":
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 4:
            raise ValueError("bounds need four comma-separated numbers: l11,u11,l22,u22")
        return cls(*vals)


class Characteristics(NamedTuple):
    """Drift and diffusion components; each entry a scalar or node array."""

    alpha1: np.ndarray
    alpha2: np.ndarray
    beta11: np.ndarray
    beta12: np.ndarray
    beta22: np.ndarray


@dataclass(frozen=True)
class DualDerivatives:
    """``a = grad phi``, ``b = hess phi / 2`` and the short rate at each node."""

    a1: np.ndarray
    a2: np.ndarray
    b11: np.ndarray
    b12: np.ndarray
    b22: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        for name in ("a1", "a2", "b11", "b12", "b22", "r"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite dual derivative {name}")
            object.__setattr__(self, name, v)

    @classmethod
    def from_phi(cls, dz, dr, dzz, drr, dzr, r) -> "DualDerivatives":
        return cls(a1=dz, a2=dr, b11=0.5 * dzz, b12=0.5 * dzr, b22=0.5 * drr, r=r)


# --------------------------------------------------------------------------
# costs


def _in_gamma_common(c: Characteristics, r, tol=1e-12):
    psd = c.beta12**2 <= c.beta11 * c.beta22 * (1 + tol) + tol
    drift = np.abs(c.alpha1 - (r - 0.5 * c.beta11)) <= tol * (1 + np.abs(r))
    return psd & drift & (c.beta11 >= 0) & (c.beta22 >= 0)


def quadratic_cost(c: Characteristics, ref: Characteristics):
    """||alpha - alpha_ref||^2 + ||beta - beta_ref||_Fro^2 (off-diagonal counted twice)."""
    return (
        (c.alpha1 - ref.alpha1) ** 2
        + (c.alpha2 - ref.alpha2) ** 2
        + (c.beta11 - ref.beta11) ** 2
        + 2.0 * (c.beta12 - ref.beta12) ** 2
        + (c.beta22 - ref.beta22) ** 2
    )


def cost_joint(c: Characteristics, ref: Characteristics, bounds: Bounds, r):
    """Quadratic cost on the joint admissible set, +inf outside it."""
    ok = _in_gamma_common(c, r)
    ok &= (c.beta11 >= bounds.d11_lo) & (c.beta11 <= bounds.d11_hi)
    ok &= (c.beta22 >= bounds.d22_lo) & (c.beta22 <= bounds.d22_hi)
    return np.where(ok, quadratic_cost(c, ref), np.inf)


def cost_pinned(c: Characteristics, ref: Characteristics, bounds: Bounds, r, tol=1e-12):
    """Quadratic cost when alpha2 and beta22 are pinned to the reference."""
    ok = _in_gamma_common(c, r)
    ok &= (c.beta11 >= bounds.d11_lo) & (c.beta11 <= bounds.d11_hi)
    ok &= np.abs(c.alpha2 - ref.alpha2) <= tol * (1 + np.abs(ref.alpha2))
    ok &= np.abs(c.beta22 - ref.beta22) <= tol * (1 + np.abs(ref.beta22))
    return np.where(ok, quadratic_cost(c, ref), np.inf)


def H(x, xbar, s, p: float = 4.0):
    """Barrier cost: zero at ``x = xbar``, infinite for ``x <= s``."""
    x, xbar, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, xbar, s)))
    ok = (x > s) & (xbar > s)
    y = np.where(ok, (x - s) / np.where(ok, xbar - s, 1.0), 1.0)
    val = (p - 1.0) * y ** (1.0 + p) + (p + 1.0) * y ** (1.0 - p) - 2.0 * p
    out = np.where(ok, val, np.inf)
    return out[()] if out.ndim == 0 else out


def seq_floor(ref: Characteristics):
    """``s = rho_ref^2 sigma_r^2`` recovered from pinned beta12, beta22."""
    return np.asarray(ref.beta12, dtype=float) ** 2 / np.asarray(ref.beta22, dtype=float)


def cost_seq(c: Characteristics, ref: Characteristics, r, p: float = 4.0, tol=1e-12):
    ok = np.abs(c.alpha1 - (r - 0.5 * c.beta11)) <= tol * (1 + np.abs(r))
    for name in ("alpha2", "beta12", "beta22"):
        v, w = getattr(c, name), getattr(ref, name)
        ok &= np.abs(v - w) <= tol * (1 + np.abs(w))
    return np.where(ok, H(c.beta11, ref.beta11, seq_floor(ref), p), np.inf)


def cost(variant: Variant, c: Characteristics, ref: Characteristics, bounds: Bounds, r, p: float = 4.0):
    variant = Variant.parse(variant)
    if variant is Variant.JOINT:
        return cost_joint(c, ref, bounds, r)
    if variant is Variant.SEQ:
        return cost_seq(c, ref, r, p)
    return cost_pinned(c, ref, bounds, r)


def bracket(variant, c: Characteristics, d: DualDerivatives, ref, bounds, p: float = 4.0):
    """The dual bracket ``alpha.a + beta:b - F``."""
    lin = (
        c.alpha1 * d.a1 + c.alpha2 * d.a2
        + c.beta11 * d.b11 + 2.0 * c.beta12 * d.b12 + c.beta22 * d.b22
    )
    return lin - cost(variant, c, ref, bounds, d.r, p)


# --------------------------------------------------------------------------
# closed-form maximisers


def _clamp_band(candidate, b11, b22):
    band = np.sqrt(np.maximum(b11 * b22, 0.0))
    b12 = np.clip(candidate, -band, band)
    strict = np.abs(candidate) < band
    return b12, strict


def optimal_joint(d: DualDerivatives, ref: Characteristics, bounds: Bounds):
    """Joint variant; returns ``(Characteristics, strict_interior)``."""
    alpha2 = ref.alpha2 + 0.5 * d.a2
    beta11 = np.clip(ref.beta11 + (2.0 * d.b11 - d.a1) / 5.0, bounds.d11_lo, bounds.d11_hi)
    beta22 = np.clip(ref.beta22 + 0.5 * d.b22, bounds.d22_lo, bounds.d22_hi)
    beta12, strict = _clamp_band(ref.beta12 + 0.5 * d.b12, beta11, beta22)
    alpha1 = d.r - 0.5 * beta11
    return Characteristics(alpha1, alpha2, beta11, beta12, beta22), strict


def _optimal_pinned(d: DualDerivatives, ref: Characteristics, bounds: Bounds, beta22):
    beta11 = np.clip(ref.beta11 + (2.0 * d.b11 - d.a1) / 5.0, bounds.d11_lo, bounds.d11_hi)
    beta12, strict = _clamp_band(ref.beta12 + 0.5 * d.b12, beta11, beta22)
    alpha1 = d.r - 0.5 * beta11
    alpha2 = np.broadcast_to(ref.alpha2, np.shape(beta11)) if np.ndim(beta11) else ref.alpha2
    beta22 = np.broadcast_to(beta22, np.shape(beta11)) if np.ndim(beta11) else beta22
    return Characteristics(alpha1, alpha2, beta11, beta12, beta22), strict


def optimal_full_seq(d: DualDerivatives, ref: Characteristics, bounds: Bounds):
    """Full-sequential variant: ``alpha2``/``beta22`` stay at the reference."""
    return _optimal_pinned(d, ref, bounds, ref.beta22)


def optimal_lsv(d: DualDerivatives, ref: Characteristics, bounds: Bounds, xi, v):
    """Stochastic-volatility variant: ``beta22 = xi^2 v`` and the band is ``xi sqrt(v beta11)``."""
    beta22 = np.asarray(xi, dtype=float) ** 2 * np.maximum(np.asarray(v, dtype=float), 0.0)
    return _optimal_pinned(d, ref, bounds, beta22)


def optimal_seq_beta11(g, sigma2_ref, s, p: float = 4.0):
    """Maximiser of ``x g / 2 - H(x, sigma2_ref, s)`` with ``g = phi_zz - phi_z``.

    Writing ``y = (x - s)/D`` with ``D = sigma2_ref - s`` the first-order
    condition is ``y^p - y^-p = c`` with ``c = g D / (2 (p^2 - 1))``, whose
    positive root is ``y^p = c/2 + sqrt(c^2/4 + 1)``.
    """
    g, sigma2_ref, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (g, sigma2_ref, s)))
    D = sigma2_ref - s
    if np.any(D <= 0):
        raise ValueError("sequential cost undefined: reference variance must exceed rho_ref^2 sigma_r^2")
    c = g * D / (2.0 * (p * p - 1.0))
    root = np.sqrt(0.25 * c * c + 1.0)
    # rationalised form avoids cancellation when c is large and negative
    w = np.where(c >= 0, 0.5 * c + root, 1.0 / (root - 0.5 * c))
    out = s + D * w ** (1.0 / p)
    return out[()] if out.ndim == 0 else out


def optimal_seq(d: DualDerivatives, ref: Characteristics, p: float = 4.0):
    """Sequential variant: only ``beta11`` moves; everything else pinned."""
    s = seq_floor(ref)
    beta11 = optimal_seq_beta11(2.0 * d.b11 - d.a1, ref.beta11, s, p)
    shape = np.shape(beta11)
    pin = (lambda x: np.broadcast_to(x, shape)) if shape else (lambda x: x)
    c = Characteristics(d.r - 0.5 * beta11, pin(ref.alpha2), beta11, pin(ref.beta12), pin(ref.beta22))
    return c, np.ones(shape, dtype=bool) if shape else True


def optimal(variant, d: DualDerivatives, ref: Characteristics, bounds: Bounds, p: float = 4.0, lsv_xi=None, lsv_v=None):
    """Dispatch to the variant's maximiser; returns ``(c, strict, cost)``."""
    variant = Variant.parse(variant)
    if variant is Variant.JOINT:
        c, strict = optimal_joint(d, ref, bounds)
        return c, strict, quadratic_cost(c, ref)
    if variant is Variant.SEQ:
        c, strict = optimal_seq(d, ref, p)
        return c, strict, H(c.beta11, ref.beta11, seq_floor(ref), p)
    if variant is Variant.FULL_SEQ:
        c, strict = optimal_full_seq(d, ref, bounds)
    else:
        if lsv_xi is None:
            c, strict = optimal_full_seq(d, ref, bounds)
        else:
            c, strict = optimal_lsv(d, ref, bounds, lsv_xi, lsv_v)
    return c, strict, quadratic_cost(c, ref)


# --------------------------------------------------------------------------
# brute-force oracle


def _polish(fn, x, lo, hi, sweeps=200, tol=1e-10):
    """Coordinate ascent with bounded scalar searches.

    ``fn(x)`` is maximised; ``lo``/``hi`` are callables returning the feasible
    interval of coordinate ``k`` given the others.  Stops when a sweep moves
    no coordinate by more than ``tol`` or no longer raises ``fn`` beyond
    rounding (near the optimum the bracket is flat to double precision).
    """
    x = np.array(x, dtype=float)
    f_prev = fn(x)
    for _ in range(sweeps):
        moved = 0.0
        for k in range(len(x)):
            a, b = lo(k, x), hi(k, x)
            if b - a <= 0:
                x[k] = a
                continue

            def neg(t, k=k):
                y = x.copy()
                y[k] = t
                return -fn(y)

            res = minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": 1e-13, "maxiter": 500})
            best = res.x
            # the bounded search never evaluates the endpoints exactly
            for cand in (a, b, x[k]):
                if neg(cand) < neg(best):
                    best = cand
            moved = max(moved, abs(best - x[k]))
            x[k] = best
        f_new = fn(x)
        if moved < tol or f_new - f_prev <= 4 * np.finfo(float).eps * (1.0 + abs(f_new)):
            break
        f_prev = f_new
    return x


def _refine(smooth, x0, box, psd):
    """SLSQP on the smooth bracket from a lattice start; ``psd(x) >= 0`` is the band."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)    # SLSQP clips its own probes to the box
        res = minimize(lambda x: -smooth(x), np.asarray(x0, dtype=float), method="SLSQP", bounds=box,
                       constraints=[{"type": "ineq", "fun": psd}], options={"ftol": 1e-15, "maxiter": 200})
    x = np.clip(res.x, [b[0] for b in box], [b[1] for b in box])
    return x if psd(x) >= 0 else np.asarray(x0, dtype=float)


def _smooth_bracket(c: Characteristics, d: DualDerivatives, ref: dict) -> float:
    """Linear term minus quadratic cost, without the feasibility test."""
    lin = (c.alpha1 * float(d.a1) + c.alpha2 * float(d.a2) + c.beta11 * float(d.b11)
           + 2.0 * c.beta12 * float(d.b12) + c.beta22 * float(d.b22))
    return float(lin - quadratic_cost(c, Characteristics(**ref)))


def _scalar_bracket(variant: Variant, c: tuple, d: DualDerivatives, ref: dict, bounds: Bounds, p: float) -> float:
    """Scalar evaluation of the bracket straight from the cost definition."""
    a1, a2, b11, b12, b22 = c
    r = float(d.r)
    lin = a1 * float(d.a1) + a2 * float(d.a2) + b11 * float(d.b11) + 2.0 * b12 * float(d.b12) + b22 * float(d.b22)
    if abs(a1 - (r - 0.5 * b11)) > 1e-12 * (1 + abs(r)):
        return -np.inf
    if variant is Variant.SEQ:
        s = ref["beta12"] ** 2 / ref["beta22"]
        if b11 <= s:
            return -np.inf
        y = (b11 - s) / (ref["beta11"] - s)
        return lin - ((p - 1) * y ** (1 + p) + (p + 1) * y ** (1 - p) - 2 * p)
    if b12 * b12 > b11 * b22 * (1 + 1e-12) + 1e-12 or not (bounds.d11_lo <= b11 <= bounds.d11_hi):
        return -np.inf
    if variant is Variant.JOINT and not (bounds.d22_lo <= b22 <= bounds.d22_hi):
        return -np.inf
    f = (
        (a1 - ref["alpha1"]) ** 2 + (a2 - ref["alpha2"]) ** 2 + (b11 - ref["beta11"]) ** 2
        + 2.0 * (b12 - ref["beta12"]) ** 2 + (b22 - ref["beta22"]) ** 2
    )
    return lin - f


def lf_bruteforce(d: DualDerivatives, ref: Characteristics, bounds: Bounds, variant, p: float = 4.0, n: int = 61, xi=None, v=None):
    """Maximise the dual bracket at one node by grid search plus polish.

    Evaluates the cost from its definition (``cost``) on a lattice of ``n``
    points per free coordinate, keeps the best feasible point and refines it
    by coordinate ascent.  Scalar inputs only.
    """
    variant = Variant.parse(variant)
    r = float(d.r)
    fr = {k: float(getattr(ref, k)) for k in Characteristics._fields}

    def make(a2, b11, b12, b22):
        return Characteristics(r - 0.5 * b11, a2, b11, b12, b22)

    def value(c):
        return _scalar_bracket(variant, tuple(float(x) for x in c), d, fr, bounds, p)

    if variant is Variant.JOINT:
        # the alpha2 terms separate from the beta terms in the bracket
        res = minimize_scalar(lambda t: -value(make(t, fr["beta11"], fr["beta12"], fr["beta22"])))
        a2 = float(res.x)
        g11 = np.linspace(bounds.d11_lo, bounds.d11_hi, n)
        g22 = np.linspace(bounds.d22_lo, bounds.d22_hi, n)
        top = np.sqrt(bounds.d11_hi * bounds.d22_hi)
        g12 = np.linspace(-top, top, n)
        B11, B12, B22 = np.meshgrid(g11, g12, g22, indexing="ij")
        feas = B12**2 <= B11 * B22
        vals = bracket(variant, make(a2, B11, B12, B22), d, Characteristics(**fr), bounds, p)
        vals = np.where(feas, vals, -np.inf)
        k = np.unravel_index(np.argmax(vals), vals.shape)
        x0 = [B11[k], B12[k], B22[k]]

        def fn(x):
            return value(make(a2, x[0], x[1], x[2]))

        def lo(k, x):
            if k == 0:
                return max(bounds.d11_lo, x[1] ** 2 / x[2])
            if k == 1:
                return -np.sqrt(x[0] * x[2])
            return max(bounds.d22_lo, x[1] ** 2 / x[0])

        def hi(k, x):
            return [bounds.d11_hi, np.sqrt(x[0] * x[2]), bounds.d22_hi][k]

        def smooth(x):
            return _smooth_bracket(make(a2, x[0], x[1], x[2]), d, fr)

        box = [(bounds.d11_lo, bounds.d11_hi), (-top, top), (bounds.d22_lo, bounds.d22_hi)]
        x1 = _refine(smooth, x0, box, lambda x: x[0] * x[2] - x[1] ** 2)
        if fn(x1) < fn(x0):
            x1 = np.asarray(x0, dtype=float)
        x = _polish(fn, x1, lo, hi)
        return make(a2, x[0], x[1], x[2])

    if variant is Variant.SEQ:
        s = fr["beta12"] ** 2 / fr["beta22"]
        D = fr["beta11"] - s
        top = s + 20.0 * D
        grid = s + D * np.linspace(1e-3, 20.0, 20 * n)
        vals = np.array([value(make(fr["alpha2"], x, fr["beta12"], fr["beta22"])) for x in grid])
        k = int(np.argmax(vals))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        if k == 0:
            a = s + 1e-12 * D
        res = minimize_scalar(
            lambda x: -value(make(fr["alpha2"], x, fr["beta12"], fr["beta22"])),
            bounds=(a, min(b, top)), method="bounded", options={"xatol": 1e-14, "maxiter": 1000},
        )
        return make(fr["alpha2"], float(res.x), fr["beta12"], fr["beta22"])

    # full-seq and lsv: beta11, beta12 free with beta22 pinned
    if variant is Variant.LSV and xi is not None:
        b22 = float(xi) ** 2 * max(float(v), 0.0)
        fr["beta22"] = b22
    else:
        b22 = fr["beta22"]
    ref_local = Characteristics(**fr)

    def value_p(c):
        return _scalar_bracket(variant, tuple(float(x) for x in c), d, fr, bounds, p)

    g11 = np.linspace(bounds.d11_lo, bounds.d11_hi, n)
    top = np.sqrt(bounds.d11_hi * b22)
    g12 = np.linspace(-top, top, n)
    B11, B12 = np.meshgrid(g11, g12, indexing="ij")
    feas = B12**2 <= B11 * b22
    vals = bracket(variant, make(fr["alpha2"], B11, B12, b22), d, ref_local, bounds, p)
    vals = np.where(feas, vals, -np.inf)
    k = np.unravel_index(np.argmax(vals), vals.shape)

    def fn(x):
        return value_p(make(fr["alpha2"], x[0], x[1], b22))

    def lo(k, x):
        return max(bounds.d11_lo, x[1] ** 2 / b22) if k == 0 and b22 > 0 else (bounds.d11_lo if k == 0 else -np.sqrt(x[0] * b22))

    def hi(k, x):
        return bounds.d11_hi if k == 0 else np.sqrt(x[0] * b22)

    def smooth(x):
        return _smooth_bracket(make(fr["alpha2"], x[0], x[1], b22), d, fr)

    x0 = np.array([B11[k], B12[k]])
    x1 = _refine(smooth, x0, [(bounds.d11_lo, bounds.d11_hi), (-top, top)], lambda x: x[0] * b22 - x[1] ** 2)
    if fn(x1) < fn(x0):
        x1 = x0
    x = _polish(fn, x1, lo, hi)
    return make(fr["alpha2"], x[0], x[1], b22)
