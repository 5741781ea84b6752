"""Backward HJB solve with maturity jumps and policy iteration.

For multipliers ``lambda`` the value function satisfies, between maturities,

    d_t phi + sup_{(alpha, beta) in Gamma} (alpha.grad phi + 1/2 beta:hess phi - F) - r phi = 0,

with ``phi(T) = 0`` and jumps ``phi(tau_i-) = phi(tau_i+) + lambda_i G_i``.
Each time step is solved by policy iteration: optimal characteristics are read
off the derivatives of the current iterate, the resulting linear theta-scheme
step is solved, and the two are alternated until the sup-norm change drops
below ``eps2``.

The same factorised linear step is applied to the payoff columns, which
gives the model prices ``E[exp(-int r) G_i]`` under the optimal
characteristics, i.e. the exact derivative of ``phi(0, x0)`` with respect to
``lambda`` for this discretisation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, fd_gradient, fd_hessian
from .instruments import QuoteSet, payoff_on_grid
from .optimisers import Bounds, Characteristics, DualDerivatives, Variant, optimal
from .pde import ImplicitSystem, ModelSurfaces

log = logging.getLogger(__name__)


class PolicyIterationError(RuntimeError):
    pass


@dataclass
class HjbProblem:
    """Everything the backward sweep needs apart from ``lambda``.

    ``payoffs`` are vega-scaled (payoff / weight), shape ``(n, nz, nr)``;
    ``rate`` is the unscaled short rate at each node.
    """

    grid: Grid
    variant: Variant
    reference: ModelSurfaces
    bounds: Bounds
    rate: np.ndarray
    payoffs: np.ndarray
    maturity_steps: np.ndarray
    x0: tuple[float, float]
    eps2: float = 1e-8
    max_inner: int = 200
    p: float = 4.0
    theta: float = 0.5
    damping_steps: int = 2

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.maturity_steps = np.asarray(self.maturity_steps, dtype=int)
        self.payoffs = np.asarray(self.payoffs, dtype=float)
        if self.payoffs.shape[0] != self.maturity_steps.size:
            raise ValueError("one payoff per maturity required")
        if np.any(self.maturity_steps < 1):
            raise ValueError("maturities must lie after t = 0")
        self.rate = np.broadcast_to(np.asarray(self.rate, dtype=float), self.grid.shape)

    @property
    def n(self) -> int:
        return self.maturity_steps.size

    @property
    def n_steps(self) -> int:
        return int(self.maturity_steps.max())

    @classmethod
    def from_quotes(cls, quotes: QuoteSet, grid: Grid, variant, reference: ModelSurfaces, bounds: Bounds,
                    rate, x0, **kw) -> "HjbProblem":
        w = quotes.weights
        pay = np.stack([payoff_on_grid(q, grid, quotes.rate_scale) / wi for q, wi in zip(quotes.instruments, w)])
        return cls(grid=grid, variant=variant, reference=reference, bounds=bounds, rate=rate,
                   payoffs=pay, maturity_steps=grid.steps_of_days(quotes.maturity_days), x0=tuple(x0), **kw)


@dataclass
class HjbSolution:
    phi0: np.ndarray                       # phi(0, .)
    value: float                           # phi(0, x0)
    prices: np.ndarray                     # scaled model prices at x0
    price_fields: np.ndarray               # (nz, nr, n) at t = 0
    surfaces: ModelSurfaces                # optimal characteristics per step
    inner_iterations: np.ndarray           # per step
    strict_violations: int
    contraction_violations: int
    phi_path: np.ndarray | None = None     # (n_steps + 1, nz, nr) when requested
    residual_history: list = field(default_factory=list)


def add_jump(phi: np.ndarray, lam, payoffs) -> np.ndarray:
    """``phi + sum_i lam_i G_i`` for the payoffs maturing at this slice."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    payoffs = np.asarray(payoffs, dtype=float)
    if payoffs.ndim == 2:
        payoffs = payoffs[None]
    return phi + np.tensordot(lam, payoffs, axes=(0, 0))


def optimal_characteristics(phi: np.ndarray, problem: HjbProblem, ref: Characteristics):
    grid = problem.grid
    dz, dr = fd_gradient(phi, grid)
    dzz, drr, dzr = fd_hessian(phi, grid)
    d = DualDerivatives.from_phi(dz, dr, dzz, drr, dzr, problem.rate)
    return optimal(problem.variant, d, ref, problem.bounds, problem.p)


def policy_iteration_step(phi_next: np.ndarray, anchor: np.ndarray, problem: HjbProblem, ref: Characteristics,
                          theta: float = 1.0, phi_guess: np.ndarray | None = None):
    """Solve one backward step of the HJB by policy iteration.

    Controls are computed from ``theta * phi_old + (1 - theta) * phi_next``.
    Returns ``(phi, characteristics, system, iterations, strict, residuals)``;
    ``system`` is the factorised linear step of the final policy.
    """
    phi_old = phi_next if phi_guess is None else phi_guess
    residuals = []
    for it in range(1, problem.max_inner + 1):
        mix = phi_old if theta == 1.0 else theta * phi_old + (1.0 - theta) * phi_next
        c, strict, cost = optimal_characteristics(mix, problem, ref)
        system = ImplicitSystem(problem.grid, c, problem.rate, problem.grid.dt, theta)
        phi_new = system.step(phi_next, anchor, source=cost)
        diff = float(np.max(np.abs(phi_new - phi_old)))
        residuals.append(diff)
        if diff < problem.eps2:
            return phi_new, c, system, it, strict, residuals
        phi_old = phi_new
    raise PolicyIterationError(f"policy iteration did not converge in {problem.max_inner} iterations (last change {residuals[-1]:.3e})")


def hjb_solve(lam, problem: HjbProblem, keep_path: bool = False) -> HjbSolution:
    """Backward sweep from the last maturity to t = 0."""
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.size != problem.n:
        raise ValueError(f"expected {problem.n} multipliers, got {lam.size}")
    if not np.all(np.isfinite(lam)):
        raise ValueError("multipliers must be finite")
    grid = problem.grid
    K = problem.n_steps
    n = problem.n
    phi = np.zeros(grid.shape)
    psi = np.zeros(grid.shape + (n,))
    anchor_phi = phi.copy()
    anchor_psi = psi.copy()
    path = np.zeros((K + 1,) + grid.shape) if keep_path else None
    items: list[Characteristics] = [None] * K  # type: ignore[list-item]
    inner = np.zeros(K, dtype=int)
    strict_bad = 0
    contraction_bad = 0
    history = []
    since_jump = np.inf

    def insert(k, phi, psi):
        hit = np.nonzero(problem.maturity_steps == k)[0]
        if hit.size:
            phi = add_jump(phi, lam[hit], problem.payoffs[hit])
            psi = psi.copy()
            for i in hit:
                psi[..., i] += problem.payoffs[i]
        return phi, psi, hit.size > 0

    phi, psi, jumped = insert(K, phi, psi)
    anchor_phi, anchor_psi = phi.copy(), psi.copy()
    since_jump = 0
    prev = None
    if keep_path:
        path[K] = phi
    for k in range(K - 1, -1, -1):
        ref = problem.reference.at(k)
        theta = 1.0 if since_jump < problem.damping_steps else problem.theta
        # linear extrapolation in time is a better first policy than phi(t_{k+1})
        guess = None if (prev is None or since_jump == 0) else 2.0 * phi - prev
        try:
            phi_new, c, system, its, strict, res = policy_iteration_step(phi, anchor_phi, problem, ref, theta, guess)
        except PolicyIterationError as exc:
            raise PolicyIterationError(f"step {k}: {exc}") from exc
        inner[k] = its
        history.append(res)
        if np.ndim(strict):
            strict_bad += int(np.count_nonzero(~np.asarray(strict)[1:-1, 1:-1]))
        if len(res) > 2 and np.any(np.diff(res[1:]) > 0):
            contraction_bad += 1
        psi = system.step(psi, anchor_psi)
        prev, phi = phi, phi_new
        items[k] = c
        since_jump += 1
        if k > 0:
            phi, psi, jumped = insert(k, phi, psi)
            if jumped or k in _anchor_steps(problem):
                anchor_phi, anchor_psi = phi.copy(), psi.copy()
            if jumped:
                since_jump = 0
        if keep_path:
            path[k] = phi
    surfaces = ModelSurfaces.stack(items, problem.reference.rate_scale)
    prices = np.asarray(grid.interpolate(psi, *problem.x0), dtype=float).reshape(n)
    value = float(grid.interpolate(phi, *problem.x0))
    return HjbSolution(
        phi0=phi, value=value, prices=prices, price_fields=psi, surfaces=surfaces,
        inner_iterations=inner, strict_violations=strict_bad,
        contraction_violations=contraction_bad, phi_path=path, residual_history=history,
    )


def _anchor_steps(problem: HjbProblem) -> set:
    return set(int(s) for s in problem.maturity_steps)
