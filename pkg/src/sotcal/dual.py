"""Outer maximisation of the dual objective over the Lagrange multipliers.

For multipliers ``lam`` the dual objective is

    L(lam) = lam . u~ - phi^lam(0, X0)

where ``u~`` are the vega-scaled quotes and ``phi^lam`` solves the HJB with
jumps ``lam_i G~_i`` at the maturities.  Its gradient is the vector of
scaled price mismatches ``u~_i - E[exp(-int r) G~_i]`` under the optimal
characteristics, which the HJB sweep returns alongside ``phi``.

``calibrate`` maximises ``L`` with L-BFGS (started at ``lam = 0``) until
``max |grad L| < eps1``; because of the vega scaling this is an implied-vol
error criterion.  Optionally the output is smoothed and fed back as the
reference of a new run ("reference model iteration"); the surfaces finally
reported always come from an unsmoothed run.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize

from .grid import Grid
from .hjb import HjbProblem, HjbSolution, PolicyIterationError, hjb_solve
from .instruments import QuoteSet, payoff_on_grid, report_ivs
from .optimisers import Bounds, Variant, seq_floor
from .pde import ModelSurfaces, SolverError, adi_forward_price

log = logging.getLogger(__name__)


@dataclass
class CalibrationConfig:
    """Tolerances, bounds and budgets of one calibration.

    ``eps1`` is the stopping tolerance on ``max |grad L|`` (vega-scaled, i.e.
    implied-vol units); ``eps2`` the policy-iteration tolerance on each time
    slice.  ``max_evals`` caps the dual evaluations of each smoothing epoch.
    ``smoothing_iters`` is the largest number of reference-model iterations;
    at least ``min_smoothing_iters`` are run even when the first run already
    converges.  ``smoothing_sigma`` is the Gaussian kernel width in cells,
    truncated at ``smoothing_radius`` cells.
    """

    variant: Variant = Variant.JOINT
    eps1: float = 1e-4
    eps2: float = 1e-8
    bounds: Bounds = field(default_factory=Bounds)
    rate_scale: float = 100.0
    max_evals: int = 150
    smoothing_iters: int = 0
    min_smoothing_iters: int = 0
    smoothing_sigma: float = 1.0
    smoothing_radius: int = 2
    warm_start: bool = False
    p: float = 4.0
    theta: float = 0.5
    damping_steps: int = 2
    max_inner: int = 200

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("eps1 and eps2 must be positive")
        if self.rate_scale <= 0:
            raise ValueError("rate scale must be positive")
        if self.max_evals < 1:
            raise ValueError("max_evals must be at least 1")
        if self.smoothing_iters < 0 or self.min_smoothing_iters < 0:
            raise ValueError("smoothing iteration counts must be non-negative")
        if self.min_smoothing_iters > self.smoothing_iters:
            raise ValueError("min_smoothing_iters exceeds smoothing_iters")


@dataclass
class DualEvaluation:
    lam: np.ndarray
    value: float
    gradient: np.ndarray
    solution: HjbSolution

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


class CalibrationProblem:
    """Quotes, grid and reference bundled into an evaluable dual objective."""

    def __init__(self, quotes: QuoteSet, grid: Grid, reference: ModelSurfaces, rate, x0,
                 cfg: CalibrationConfig):
        if not quotes.prepared:
            raise ValueError("quotes must be prepared (vega weights) before calibration")
        if cfg.variant is Variant.SEQ:
            s = seq_floor(reference.at(0))
            if np.any(np.asarray(reference.beta11) <= s):
                raise ValueError("sequential variant needs beta11_ref > beta12_ref^2 / beta22_ref everywhere")
        self.quotes = quotes
        self.grid = grid
        self.reference = reference
        self.rate = np.asarray(rate, dtype=float)
        self.x0 = tuple(float(v) for v in x0)
        self.cfg = cfg
        self.target = quotes.scaled_prices
        self.hjb = HjbProblem.from_quotes(
            quotes, grid, cfg.variant, reference, cfg.bounds, self.rate, self.x0,
            eps2=cfg.eps2, max_inner=cfg.max_inner, p=cfg.p, theta=cfg.theta, damping_steps=cfg.damping_steps,
        )
        self.n_evals = 0
        self._last: DualEvaluation | None = None

    @property
    def n(self) -> int:
        return len(self.quotes)

    def with_reference(self, reference: ModelSurfaces) -> "CalibrationProblem":
        return CalibrationProblem(self.quotes, self.grid, reference, self.rate, self.x0, self.cfg)

    def evaluate(self, lam) -> DualEvaluation:
        lam = np.array(lam, dtype=float).ravel()
        if self._last is not None and np.array_equal(lam, self._last.lam):
            return self._last
        sol = hjb_solve(lam, self.hjb)
        self.n_evals += 1
        ev = DualEvaluation(lam=lam, value=float(lam @ self.target - sol.value),
                            gradient=self.target - sol.prices, solution=sol)
        self._last = ev
        return ev


def evaluate_dual(lam, problem: CalibrationProblem) -> DualEvaluation:
    return problem.evaluate(lam)


def dual_objective(lam, problem: CalibrationProblem) -> float:
    """``L(lam) = lam . u~ - phi(0, X0)``."""
    return problem.evaluate(lam).value


def dual_gradient(lam, problem: CalibrationProblem) -> np.ndarray:
    """``u~_i - E[exp(-int r) G~_i(X_tau_i)]`` under the lam-optimal model."""
    return problem.evaluate(lam).gradient


# --------------------------------------------------------------------------
# reference-model iteration


def _smooth2d(x: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    if sigma <= 0:
        return x.copy()
    return gaussian_filter(x, sigma=(0.0, sigma, sigma), truncate=radius / sigma, mode="nearest")


def smooth_reference_iteration(surfaces: ModelSurfaces, grid: Grid, cfg: CalibrationConfig,
                               rate=None) -> ModelSurfaces:
    """Spatially smooth a calibrated model for use as the next reference.

    Each time slice is filtered with a truncated Gaussian (no smoothing in
    time).  Components that the variant pins to the reference are copied
    unchanged; the drift ``alpha1 = r - beta11 / 2`` is rebuilt from the
    smoothed ``beta11``, variances are clamped back into the bounds and
    ``beta12`` into the positive-semidefinite band.
    """
    variant = cfg.variant
    b = cfg.bounds
    sig, rad = cfg.smoothing_sigma, cfg.smoothing_radius
    out = surfaces.copy()
    b11 = _smooth2d(surfaces.beta11, sig, rad)
    if variant is Variant.SEQ:
        # only beta11 moves; stay strictly above the barrier floor
        floor = surfaces.beta12**2 / surfaces.beta22
        b11 = np.maximum(b11, floor + 1e-12 * (1.0 + floor))
    else:
        b11 = np.clip(b11, b.d11_lo, b.d11_hi)
    out.beta11 = b11
    if variant is Variant.JOINT:
        out.alpha2 = _smooth2d(surfaces.alpha2, sig, rad)
        out.beta22 = np.clip(_smooth2d(surfaces.beta22, sig, rad), b.d22_lo, b.d22_hi)
    if variant is not Variant.SEQ:
        band = np.sqrt(out.beta11 * out.beta22)
        out.beta12 = np.clip(_smooth2d(surfaces.beta12, sig, rad), -band, band)
    r = np.zeros(grid.shape) if rate is None else np.asarray(rate, dtype=float)
    out.alpha1 = r - 0.5 * out.beta11
    if out.psd_violation() > 1e-12:
        raise SolverError(f"smoothed reference is not positive semidefinite ({out.psd_violation():.3e})")
    return out


# --------------------------------------------------------------------------
# outer loop


@dataclass
class CalibrationResult:
    lam: np.ndarray
    surfaces: ModelSurfaces
    reference: ModelSurfaces             # reference of the final (reported) run
    value: float
    scaled_prices: np.ndarray            # model prices / vega weight
    prices: np.ndarray                   # model prices in currency
    ivs: np.ndarray
    market_ivs: np.ndarray
    grad_norm: float
    grad_history: list
    value_history: list
    converged: bool
    n_evals: int
    wall_time: float
    smoothing_log: list
    variant: Variant
    smoothed_output: bool = False        # always False: the reported model is a raw optimiser output
    message: str = ""
    inner_iterations: np.ndarray | None = None
    strict_violations: int = 0
    contraction_violations: int = 0

    @property
    def iv_errors(self) -> np.ndarray:
        return self.ivs - self.market_ivs


class _Converged(Exception):
    def __init__(self, ev: DualEvaluation):
        self.ev = ev


class _Exhausted(Exception):
    pass


def _maximise(problem: CalibrationProblem, lam0: np.ndarray, eps1: float, max_evals: int):
    """L-BFGS on ``-L``; stops as soon as any evaluated point meets ``eps1``.

    ``max_evals`` is a hard cap on dual evaluations (the line search may
    otherwise overrun the optimiser's own function-count limit).
    """
    grad_hist: list[float] = []
    value_hist: list[float] = []
    best = {"ev": None}
    start = problem.n_evals

    def fun(x):
        if problem.n_evals - start >= max_evals and not (problem._last is not None and np.array_equal(x, problem._last.lam)):
            raise _Exhausted
        ev = problem.evaluate(x)
        grad_hist.append(ev.grad_norm)
        if best["ev"] is None or ev.value > best["ev"].value:
            best["ev"] = ev
        if ev.grad_norm < eps1:
            raise _Converged(ev)
        return -ev.value, -ev.gradient

    def accepted(xk):
        if problem._last is not None and np.array_equal(xk, problem._last.lam):
            value_hist.append(problem._last.value)

    message = ""
    try:
        res = minimize(fun, lam0, jac=True, method="L-BFGS-B", callback=accepted,
                       options={"maxcor": 10, "gtol": eps1, "ftol": 1e-15, "maxfun": max_evals,
                                "maxiter": 10 * max_evals, "maxls": 40})
        message = str(res.message)
        last = problem._last
        final = last if last is not None and np.array_equal(last.lam, res.x) else best["ev"]
        # report the best point met (the line search may end on a worse probe)
        if best["ev"] is not None and best["ev"].grad_norm < final.grad_norm and best["ev"].value >= final.value:
            final = best["ev"]
        converged = final.grad_norm < eps1
    except _Converged as stop:
        final, converged, message = stop.ev, True, "gradient tolerance reached"
    except _Exhausted:
        final, converged = best["ev"], False
        message = f"evaluation budget of {max_evals} exhausted"
    return final, converged, message, grad_hist, value_hist


def calibrate(cfg: CalibrationConfig, quotes: QuoteSet, reference: ModelSurfaces, grid: Grid, rate, x0,
              lam0=None) -> CalibrationResult:
    """Calibrate to ``quotes`` starting from ``lam = 0`` (or ``lam0``).

    Runs one L-BFGS epoch on the given reference.  If it has not converged,
    or fewer than ``min_smoothing_iters`` smoothing epochs have run, the
    output is smoothed into a new reference and the optimisation restarts
    (from ``lam = 0``, or from the previous multipliers with ``warm_start``),
    up to ``smoothing_iters`` times.  The last run's raw output is returned.
    """
    t0 = time.perf_counter()
    problem = CalibrationProblem(quotes, grid, reference, rate, x0, cfg)
    lam = np.zeros(problem.n) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    grad_hist: list[float] = []
    value_hist: list[float] = []
    epochs = []
    total_evals = 0
    ev = None
    converged = False
    message = ""
    for epoch in range(cfg.smoothing_iters + 1):
        if epoch > 0:
            new_ref = smooth_reference_iteration(ev.solution.surfaces, grid, cfg, problem.rate)
            problem = problem.with_reference(new_ref)
            lam = ev.lam.copy() if cfg.warm_start else np.zeros(problem.n)
        try:
            ev, converged, message, gh, vh = _maximise(problem, lam, cfg.eps1, cfg.max_evals)
        except (PolicyIterationError, SolverError) as exc:
            message = f"epoch {epoch}: {exc}"
            log.warning("calibration stopped: %s", message)
            if ev is None:
                raise
            converged = False
            epochs.append({"epoch": epoch, "evals": problem.n_evals, "grad_norm": float("nan"),
                           "converged": False, "error": str(exc)})
            break
        total_evals += problem.n_evals
        grad_hist.extend(gh)
        value_hist.extend(vh)
        epochs.append({"epoch": epoch, "evals": problem.n_evals, "grad_norm": ev.grad_norm,
                       "value": ev.value, "converged": converged})
        log.info("epoch %d: %d evaluations, |grad|inf = %.3e", epoch, problem.n_evals, ev.grad_norm)
        if converged and epoch >= cfg.min_smoothing_iters:
            break
    sol = ev.solution
    scaled = sol.prices
    prices = scaled * quotes.weights
    return CalibrationResult(
        lam=ev.lam, surfaces=sol.surfaces, reference=problem.reference, value=ev.value,
        scaled_prices=scaled, prices=prices, ivs=report_ivs(quotes, prices),
        market_ivs=report_ivs(quotes, quotes.prices), grad_norm=ev.grad_norm,
        grad_history=grad_hist, value_history=value_hist, converged=converged, n_evals=total_evals,
        wall_time=time.perf_counter() - t0, smoothing_log=epochs, variant=cfg.variant, message=message,
        inner_iterations=sol.inner_iterations, strict_violations=sol.strict_violations,
        contraction_violations=sol.contraction_violations,
    )


def reprice(result_surfaces: ModelSurfaces, quotes: QuoteSet, grid: Grid, rate, x0) -> np.ndarray:
    """Independent ADI repricing (currency) of every quote on given surfaces."""
    pay = np.stack([payoff_on_grid(q, grid, quotes.rate_scale) for q in quotes.instruments])
    return adi_forward_price(result_surfaces, pay, grid.steps_of_days(quotes.maturity_days), grid, rate, x0).prices
