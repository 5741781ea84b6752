"""Linear parabolic solvers on the (z, r) grid.

* ``ImplicitSystem`` / ``implicit_backward_step``: one fully implicit Euler
  step of  d_t psi + alpha . grad psi + 1/2 beta : hess psi - r psi = source
  backwards in time, with central differences (cross term included), the
  frozen-curvature boundary rows and a direct sparse LU solve.
* ``adi_forward_price``: Craig-Sneyd ADI pricing of one or many payoffs over a
  time-dependent coefficient path.
* ``fokker_planck_forward``: conservative finite-volume solve of the
  discounted Fokker-Planck equation started from a point mass, used to check
  the pricing duality.

Coefficients are ``Characteristics`` of node arrays in scaled units; the
discount rate is a separate node array in unscaled (true) rate units.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import Grid, boundary_curvature, apply_frozen_curvature_boundary, flatten, unflatten
from .optimisers import Characteristics

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# stencil bookkeeping

_OFFSETS = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]


class _Pattern:
    """Fixed sparsity pattern of the 9-point operator plus boundary rows.

    Building the CSC matrix from data in a fixed order avoids re-sorting
    indices at every assembly (the HJB solve assembles thousands of times).
    """

    _cache: dict = {}

    def __init__(self, nz: int, nr: int):
        self.nz, self.nr = nz, nr
        idx = np.arange(nz * nr).reshape((nz, nr), order="F")
        inner = idx[1:-1, 1:-1].ravel(order="F")
        rows, cols = [], []
        for di, dj in _OFFSETS:
            rows.append(inner)
            cols.append(idx[1 + di: nz - 1 + di, 1 + dj: nr - 1 + dj].ravel(order="F"))
        self.n_inner = inner.size
        # boundary rows: node b, first and second inward neighbours
        b_nodes, b1, b2 = [], [], []
        jj = np.arange(1, nr - 1)
        ii = np.arange(nz)
        for j, s in ((0, 1), (nr - 1, -1)):
            b_nodes.append(idx[1:-1, j]); b1.append(idx[1:-1, j + s]); b2.append(idx[1:-1, j + 2 * s])
        for i, s in ((0, 1), (nz - 1, -1)):
            b_nodes.append(idx[i, :]); b1.append(idx[i + s, :]); b2.append(idx[i + 2 * s, :])
        self.b_nodes = np.concatenate(b_nodes)
        b1, b2 = np.concatenate(b1), np.concatenate(b2)
        rows += [self.b_nodes, self.b_nodes, self.b_nodes]
        cols += [self.b_nodes, b1, b2]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        n = nz * nr
        order = sp.csc_matrix((np.arange(rows.size, dtype=float) + 1.0, (rows, cols)), shape=(n, n))
        order.sort_indices()
        self.indptr = order.indptr
        self.indices = order.indices
        self.perm = (order.data - 1.0).astype(int)
        self.n = n
        self.inner = inner
        del ii, jj

    @classmethod
    def get(cls, nz, nr) -> "_Pattern":
        key = (nz, nr)
        if key not in cls._cache:
            cls._cache[key] = cls(nz, nr)
        return cls._cache[key]

    def build(self, stencil: list[np.ndarray]) -> sp.csc_matrix:
        nb = self.b_nodes.size
        bvals = [np.ones(nb), -2.0 * np.ones(nb), np.ones(nb)]
        data = np.concatenate([w.ravel(order="F") for w in stencil] + bvals)
        return sp.csc_matrix((data[self.perm], self.indices, self.indptr), shape=(self.n, self.n))


def _interior(x, shape):
    x = np.broadcast_to(np.asarray(x, dtype=float), shape)
    return x[1:-1, 1:-1]


def generator_stencil(grid: Grid, c: Characteristics, rate) -> list[np.ndarray]:
    """Weights of L = alpha.grad + 1/2 beta:hess - r at interior nodes, in ``_OFFSETS`` order."""
    sh = grid.shape
    a1, a2 = _interior(c.alpha1, sh), _interior(c.alpha2, sh)
    b11, b12, b22 = _interior(c.beta11, sh), _interior(c.beta12, sh), _interior(c.beta22, sh)
    r = _interior(rate, sh)
    hz, hr = grid.hz, grid.hr
    dzz, drr = 0.5 * b11 / hz**2, 0.5 * b22 / hr**2
    cz, cr = 0.5 * a1 / hz, 0.5 * a2 / hr
    x = 0.25 * b12 / (hz * hr)
    return [
        -2.0 * dzz - 2.0 * drr - r,
        dzz + cz,
        dzz - cz,
        drr + cr,
        drr - cr,
        x,
        x,
        -x,
        -x,
    ]


def _boundary_rhs(pattern: _Pattern, anchor: np.ndarray) -> np.ndarray:
    """Anchor curvature at boundary rows, in the pattern's boundary ordering."""
    k = boundary_curvature(anchor)
    parts = [k["r_lo"][1:-1], k["r_hi"][1:-1], k["z_lo"], k["z_hi"]]
    return np.concatenate(parts, axis=0)


class ImplicitSystem:
    """Factorised theta-scheme step with frozen-curvature boundary rows.

    Solves ``(I - theta dt L) psi = (I + (1 - theta) dt L) psi_next - dt * source``
    on interior nodes.  ``theta = 1`` is the fully implicit Euler step.
    """

    def __init__(self, grid: Grid, coeffs: Characteristics, rate, dt: float | None = None, theta: float = 1.0):
        if not 0.5 <= theta <= 1.0:
            raise ValueError("theta must lie in [1/2, 1]")
        self.grid = grid
        self.dt = grid.dt if dt is None else dt
        self.theta = theta
        self.pattern = _Pattern.get(grid.nz, grid.nr)
        st = generator_stencil(grid, coeffs, rate)
        self._explicit = None
        if theta < 1.0:
            ex = [(1.0 - theta) * self.dt * w for w in st]
            ex[0] = ex[0] + 1.0
            self._explicit = self.pattern.build(ex)
        st = [-theta * self.dt * w for w in st]
        st[0] = st[0] + 1.0
        self.matrix = self.pattern.build(st)
        try:
            self.lu = splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"implicit step factorisation failed: {exc}") from exc

    def rhs(self, psi_next: np.ndarray) -> np.ndarray:
        """Interior right-hand side ``(I + (1 - theta) dt L) psi_next`` (flattened)."""
        v = flatten(np.asarray(psi_next, dtype=float))
        return v.copy() if self._explicit is None else self._explicit @ v

    def solve_flat(self, b: np.ndarray, anchor: np.ndarray, check: bool = True) -> np.ndarray:
        b = b.copy()
        b[self.pattern.b_nodes] = _boundary_rhs(self.pattern, anchor)
        x = self.lu.solve(b)
        if check:
            res = self.matrix @ x - b
            scale = max(np.abs(b).max(), np.abs(x).max(), 1e-300)
            rel = np.abs(res).max() / scale
            if not np.isfinite(rel) or rel > 1e-10:
                raise SolverError(f"implicit solve residual {rel:.3e} exceeds 1e-10")
        return unflatten(x, self.grid)

    def step(self, psi_next: np.ndarray, anchor: np.ndarray, source=None, check: bool = True) -> np.ndarray:
        """Advance ``psi_next`` one step backwards; shapes ``(nz, nr[, m])``."""
        b = self.rhs(psi_next)
        if source is not None:
            b -= self.dt * flatten(np.asarray(source, dtype=float))
        return self.solve_flat(b, anchor, check)

    def solve(self, rhs: np.ndarray, anchor: np.ndarray, check: bool = True) -> np.ndarray:
        """Solve with a ready-made interior right-hand side (shape ``(nz, nr[, m])``)."""
        return self.solve_flat(flatten(np.asarray(rhs, dtype=float)), anchor, check)


def implicit_backward_step(phi_next, coeffs: Characteristics, rate, dt, grid: Grid, anchor=None, source=None):
    """One implicit Euler step ``(I - dt L) phi = phi_next - dt * source``.

    ``anchor`` defaults to ``phi_next`` (frozen curvature relative to the
    previous slice).
    """
    phi_next = np.asarray(phi_next, dtype=float)
    rhs = phi_next if source is None else phi_next - dt * np.asarray(source, dtype=float)
    system = ImplicitSystem(grid, coeffs, rate, dt, theta=1.0)
    return system.solve(rhs, phi_next if anchor is None else anchor)


# --------------------------------------------------------------------------
# coefficient paths


@dataclass
class ModelSurfaces:
    """Characteristics on the grid for each time step.

    Arrays have shape ``(n_t, nz, nr)``; ``n_t == 1`` denotes time-homogeneous
    coefficients.  Step ``k`` governs the interval ``[t_k, t_{k+1})``.
    """

    alpha1: np.ndarray
    alpha2: np.ndarray
    beta11: np.ndarray
    beta12: np.ndarray
    beta22: np.ndarray
    rate_scale: float = 100.0

    def __post_init__(self):
        shapes = {np.shape(getattr(self, f)) for f in Characteristics._fields}
        if len(shapes) != 1:
            raise ValueError(f"surface shapes disagree: {shapes}")
        (shape,) = shapes
        if len(shape) != 3:
            raise ValueError("surfaces need shape (n_t, nz, nr)")

    @classmethod
    def from_characteristics(cls, c: Characteristics, grid: Grid, rate_scale: float = 100.0) -> "ModelSurfaces":
        arrs = [np.broadcast_to(np.asarray(v, dtype=float), grid.shape)[None].copy() for v in c]
        return cls(*arrs, rate_scale=rate_scale)

    @classmethod
    def stack(cls, items: list[Characteristics], rate_scale: float = 100.0) -> "ModelSurfaces":
        return cls(*[np.stack([np.asarray(getattr(c, f), dtype=float) for c in items]) for f in Characteristics._fields], rate_scale=rate_scale)

    @property
    def n_t(self) -> int:
        return self.alpha1.shape[0]

    @property
    def time_homogeneous(self) -> bool:
        return self.n_t == 1

    def at(self, k: int) -> Characteristics:
        k = 0 if self.n_t == 1 else min(k, self.n_t - 1)
        return Characteristics(*(getattr(self, f)[k] for f in Characteristics._fields))

    def psd_violation(self) -> float:
        """Largest ``beta12^2 - beta11 beta22`` over all nodes (<= 0 when PSD)."""
        return float(np.max(self.beta12**2 - self.beta11 * self.beta22))

    def check(self, tol: float = 1e-12) -> None:
        if np.any(self.beta11 < 0) or np.any(self.beta22 < 0):
            raise ValueError("negative variance in surfaces")
        if self.psd_violation() > tol * max(1.0, float(np.max(self.beta11 * self.beta22))):
            raise ValueError("surfaces violate the PSD constraint")

    def correlation(self) -> np.ndarray:
        den = np.sqrt(self.beta11 * self.beta22)
        return np.divide(self.beta12, den, out=np.zeros_like(den), where=den > 0)

    def copy(self) -> "ModelSurfaces":
        return ModelSurfaces(*(getattr(self, f).copy() for f in Characteristics._fields), rate_scale=self.rate_scale)

    def equals(self, other: "ModelSurfaces") -> bool:
        return self.rate_scale == other.rate_scale and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in Characteristics._fields
        )


# --------------------------------------------------------------------------
# ADI


def _split_operators(grid: Grid, c: Characteristics, rate):
    """Sparse A0 (mixed), A1 (z part), A2 (r part incl. -r) on interior rows."""
    nz, nr = grid.shape
    hz, hr = grid.hz, grid.hr
    idx = np.arange(nz * nr).reshape((nz, nr), order="F")
    sh = grid.shape
    a1, a2 = _interior(c.alpha1, sh), _interior(c.alpha2, sh)
    b11, b12, b22 = _interior(c.beta11, sh), _interior(c.beta12, sh), _interior(c.beta22, sh)
    r = _interior(rate, sh)
    centre = idx[1:-1, 1:-1].ravel(order="F")

    def nb(di, dj):
        return idx[1 + di: nz - 1 + di, 1 + dj: nr - 1 + dj].ravel(order="F")

    def mat(entries):
        rows = np.concatenate([centre] * len(entries))
        cols = np.concatenate([nb(*o) for o, _ in entries])
        vals = np.concatenate([np.asarray(v).ravel(order="F") for _, v in entries])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nz * nr, nz * nr))

    dzz, drr = 0.5 * b11 / hz**2, 0.5 * b22 / hr**2
    cz, cr = 0.5 * a1 / hz, 0.5 * a2 / hr
    x = 0.25 * b12 / (hz * hr)
    A0 = mat([((1, 1), x), ((-1, -1), x), ((1, -1), -x), ((-1, 1), -x)])
    A1 = mat([((0, 0), -2 * dzz), ((1, 0), dzz + cz), ((-1, 0), dzz - cz)])
    A2 = mat([((0, 0), -2 * drr - r), ((0, 1), drr + cr), ((0, -1), drr - cr)])
    return A0, A1, A2


class _SweepSolver:
    """LU of ``I - theta dt A_k`` with frozen-curvature rows on one pair of edges."""

    def __init__(self, grid: Grid, A: sp.csr_matrix, theta_dt: float, axis: int):
        nz, nr = grid.shape
        N = nz * nr
        idx = np.arange(N).reshape((nz, nr), order="F")
        if axis == 0:  # z-edges including corners
            edges = [(idx[0, :], idx[1, :], idx[2, :]), (idx[-1, :], idx[-2, :], idx[-3, :])]
        else:  # r-edges without corners
            edges = [(idx[1:-1, 0], idx[1:-1, 1], idx[1:-1, 2]), (idx[1:-1, -1], idx[1:-1, -2], idx[1:-1, -3])]
        b = np.concatenate([e[0] for e in edges])
        b1 = np.concatenate([e[1] for e in edges])
        b2 = np.concatenate([e[2] for e in edges])
        # operator rows vanish on the boundary, so I - theta dt A has unit rows
        # there; swap them for the curvature rows b - 2 b1 + b2
        B = sp.csr_matrix(
            (np.concatenate([-2.0 * np.ones(b.size), np.ones(b.size)]), (np.concatenate([b, b]), np.concatenate([b1, b2]))),
            shape=(N, N),
        )
        M = sp.identity(N, format="csr") - theta_dt * A + B
        self.rows = b
        self.axis = axis
        self.lu = splu(M.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def solve(self, rhs_flat: np.ndarray, curv: dict) -> np.ndarray:
        b = rhs_flat.copy()
        if self.axis == 0:
            b[self.rows] = np.concatenate([curv["z_lo"], curv["z_hi"]], axis=0)
        else:
            b[self.rows] = np.concatenate([curv["r_lo"][1:-1], curv["r_hi"][1:-1]], axis=0)
        return self.lu.solve(b)


class _AdiStepper:
    def __init__(self, grid: Grid, c: Characteristics, rate, dt: float, theta: float):
        self.A0, self.A1, self.A2 = _split_operators(grid, c, rate)
        self.S1 = _SweepSolver(grid, self.A1, theta * dt, axis=0)
        self.S2 = _SweepSolver(grid, self.A2, theta * dt, axis=1)
        self.dt, self.theta = dt, theta

    def step(self, U: np.ndarray, curv: dict) -> np.ndarray:
        """One Craig-Sneyd step on flattened ``U`` (shape ``(N,)`` or ``(N, m)``)."""
        dt, th = self.dt, self.theta
        A0U, A1U, A2U = self.A0 @ U, self.A1 @ U, self.A2 @ U
        Y0 = U + dt * (A0U + A1U + A2U)
        Y1 = self.S1.solve(Y0 - th * dt * A1U, curv)
        Y2 = self.S2.solve(Y1 - th * dt * A2U, curv)
        Z0 = Y0 + 0.5 * dt * (self.A0 @ (Y2 - U))
        Z1 = self.S1.solve(Z0 - th * dt * A1U, curv)
        return self.S2.solve(Z1 - th * dt * A2U, curv)


@dataclass
class PricingResult:
    prices: np.ndarray          # value at x0 for each payoff
    fields: np.ndarray          # (nz, nr, m) value surfaces at t = 0


def adi_forward_price(surfaces: ModelSurfaces, payoffs, maturity_steps, grid: Grid, rate, x0, theta: float = 0.5, anchor_steps=None, damping_steps: int = 2) -> PricingResult:
    """Price payoffs by backward ADI from their maturities to t = 0.

    ``payoffs`` has shape ``(m, nz, nr)``; payoff ``i`` enters the backward
    sweep at step ``maturity_steps[i]``.  The frozen-curvature anchor of each
    column is reset at every step listed in ``anchor_steps`` (default: all
    maturities).  The first ``damping_steps`` steps after a payoff enters
    use ``theta = 1`` to damp the high-frequency error of the kinked payoff.
    """
    payoffs = np.asarray(payoffs, dtype=float)
    if payoffs.ndim == 2:
        payoffs = payoffs[None]
    steps = np.asarray(maturity_steps, dtype=int).ravel()
    if steps.size != payoffs.shape[0]:
        raise ValueError("one maturity step per payoff required")
    if np.any(steps < 1):
        raise ValueError("maturities must be at least one step after t = 0")
    if grid.n_steps and np.any(steps > grid.n_steps):
        raise ValueError("maturity beyond the time lattice")
    anchors = set(int(s) for s in (steps if anchor_steps is None else anchor_steps))
    m = payoffs.shape[0]
    N = grid.size
    rate = np.broadcast_to(np.asarray(rate, dtype=float), (surfaces.n_t,) + grid.shape) if np.ndim(rate) != 3 else rate
    U = np.zeros((N, m))
    anchor = np.zeros(grid.shape + (m,))
    steppers: dict = {}
    since_jump = np.inf
    for k in range(int(steps.max()), 0, -1):
        hit = np.nonzero(steps == k)[0]
        if hit.size:
            for i in hit:
                U[:, i] += flatten(payoffs[i])
            since_jump = 0
        if k in anchors or hit.size:
            anchor = unflatten(U, grid).copy()
        curv = boundary_curvature(anchor)
        th = 1.0 if since_jump < damping_steps else theta
        since_jump += 1
        kk = k - 1
        key = (0 if surfaces.time_homogeneous and rate.shape[0] == 1 else kk, th)
        if key not in steppers:
            if not surfaces.time_homogeneous:
                steppers.clear()
            steppers[key] = _AdiStepper(grid, surfaces.at(kk), rate[min(kk, rate.shape[0] - 1)], grid.dt, th)
        U = steppers[key].step(U, curv)
        fields = apply_frozen_curvature_boundary(unflatten(U, grid), anchor)
        U = flatten(fields)
    fields = unflatten(U, grid)
    prices = np.atleast_1d(grid.interpolate(fields, x0[0], x0[1]))
    return PricingResult(prices=np.asarray(prices, dtype=float).reshape(m), fields=fields)


# --------------------------------------------------------------------------
# Fokker-Planck


def _avg(n):
    return sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n))


def _dif(n, h):
    return sp.diags([-np.ones(n - 1) / h, np.ones(n - 1) / h], [0, 1], shape=(n - 1, n))


def _div(n, h):
    # node i: (F_{i+1/2} - F_{i-1/2}) / h, zero flux through the outer faces
    return sp.diags([np.ones(n - 1) / h, -np.ones(n - 1) / h], [0, -1], shape=(n, n - 1))


def _central(n, h):
    D = sp.diags([-0.5 * np.ones(n - 1) / h, 0.5 * np.ones(n - 1) / h], [-1, 1], shape=(n, n)).tolil()
    D[0, 0], D[0, 1] = -1.0 / h, 1.0 / h
    D[n - 1, n - 2], D[n - 1, n - 1] = -1.0 / h, 1.0 / h
    return D.tocsr()


def fp_operator(grid: Grid, c: Characteristics, rate) -> sp.csr_matrix:
    """Finite-volume generator acting on node densities (flattened)."""
    nz, nr = grid.shape
    Iz, Ir = sp.identity(nz), sp.identity(nr)
    Az, Dz, Vz, Cz = (sp.kron(Ir, op) for op in (_avg(nz), _dif(nz, grid.hz), _div(nz, grid.hz), _central(nz, grid.hz)))
    Ar, Dr, Vr, Cr = (sp.kron(op, Iz) for op in (_avg(nr), _dif(nr, grid.hr), _div(nr, grid.hr), _central(nr, grid.hr)))

    def diag(x):
        return sp.diags(flatten(np.broadcast_to(np.asarray(x, dtype=float), grid.shape).copy()))

    a1, a2, b11, b12, b22 = (diag(v) for v in c)
    flux_z = Az @ a1 - 0.5 * (Dz @ b11) - 0.5 * (Az @ Cr @ b12)
    flux_r = Ar @ a2 - 0.5 * (Dr @ b22) - 0.5 * (Ar @ Cz @ b12)
    return (-(Vz @ flux_z) - (Vr @ flux_r) - diag(rate)).tocsr()


@dataclass
class DensityPath:
    """Node masses (density times cell area) for each time step."""

    mass: np.ndarray        # (n_steps + 1, nz, nr)
    grid: Grid
    clipped: np.ndarray     # negative mass removed at each step

    def total_mass(self) -> np.ndarray:
        return self.mass.sum(axis=(1, 2))

    def density(self, k: int) -> np.ndarray:
        return self.mass[k] / (self.grid.hz * self.grid.hr)

    def expectation(self, payoff: np.ndarray, k: int) -> float:
        return float(np.sum(payoff * self.mass[k]))


def fokker_planck_forward(surfaces: ModelSurfaces, grid: Grid, rate, x0, n_steps: int, leak_tol: float = 0.01,
                          theta: float = 0.5, damping_steps: int = 2) -> DensityPath:
    """Forward solve of the discounted Fokker-Planck equation from a point mass.

    Time stepping is the theta scheme; the first ``damping_steps`` steps are
    fully implicit so the point mass is smoothed before Crank-Nicolson-type
    steps start (which would otherwise ring on the delta).  Negative mass is
    clipped and the remaining mass renormalised to the pre-clip total.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    m = grid.delta_weights(*x0)
    out = np.empty((n_steps + 1,) + grid.shape)
    out[0] = m
    clipped = np.zeros(n_steps + 1)
    rate = np.broadcast_to(np.asarray(rate, dtype=float), (surfaces.n_t,) + grid.shape) if np.ndim(rate) != 3 else rate
    I = sp.identity(grid.size, format="csc")
    cache: dict = {}
    area = grid.hz * grid.hr
    dt = grid.dt
    rho = flatten(m) / area
    for k in range(n_steps):
        th = 1.0 if k < damping_steps else theta
        key = (0 if surfaces.time_homogeneous and rate.shape[0] == 1 else k, th)
        if key not in cache:
            if not surfaces.time_homogeneous:
                cache.clear()
            rk = rate[min(k, rate.shape[0] - 1)]
            L = fp_operator(grid, surfaces.at(k), rk)
            lu = splu((I - th * dt * L).tocsc(), permc_spec="MMD_AT_PLUS_A")
            explicit = (I + (1.0 - th) * dt * L).tocsr() if th < 1.0 else None
            cache[key] = (lu, explicit, flatten(np.broadcast_to(rk, grid.shape).copy()))
        lu, explicit, rflat = cache[key]
        new = lu.solve(rho if explicit is None else explicit @ rho)
        before = rho.sum()
        # the only sink is discounting: d/dt total = -int r rho
        expected = new.sum() + dt * np.dot(rflat, th * new + (1.0 - th) * rho)
        if abs(expected - before) > leak_tol * abs(before):
            raise SolverError(f"Fokker-Planck mass leak {abs(expected - before) / before:.3e} at step {k}")
        neg = -new[new < 0].sum()
        if neg > 0:
            total = new.sum()
            new = np.maximum(new, 0.0)
            new *= total / new.sum()
            if neg > leak_tol * total:
                raise SolverError(f"Fokker-Planck negative mass {neg / total:.3e} at step {k}")
            log.debug("step %d: clipped negative mass %.3e", k, neg)
        clipped[k + 1] = neg * area
        rho = new
        out[k + 1] = unflatten(rho, grid) * area
    return DensityPath(mass=out, grid=grid, clipped=clipped)
