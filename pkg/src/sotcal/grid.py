"""Uniform space-time lattice, finite-difference stencils and boundary policy.

Fields live on a tensor grid over (log-price ``z``, rescaled short rate ``r``)
and are stored as numpy arrays of shape ``(nz, nr)`` so that ``field[i, j]``
is the value at ``(z[i], r[j])``.  Whenever a field has to be flattened for a
sparse linear system the node index is ``i + nz * j`` (``z`` runs fastest),
which is what ``flatten``/``unflatten`` implement.  Every module uses this one
convention.

The boundary policy is the "frozen curvature" rule: on each boundary node the
discrete second difference normal to the boundary is held equal to that of an
anchor field (the value function at the most recent maturity slice).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform 2-D spatial grid plus a uniform time lattice.

    ``r_min``/``r_max`` are in rescaled units (rate times the rescaling
    factor R), or in variance units for the stochastic-volatility variant.
    """

    z_min: float
    z_max: float
    r_min: float
    r_max: float
    nz: int
    nr: int
    dt: float = 1.0 / 365.0
    n_steps: int = 0

    def __post_init__(self):
        if self.nz < 3 or self.nr < 3:
            raise ValueError(f"need at least 3 nodes per axis, got ({self.nz}, {self.nr})")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")
        if not self.r_max > self.r_min:
            raise ValueError("r_max must exceed r_min")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    @classmethod
    def around(cls, x0: tuple[float, float], z_lo: float, z_hi: float, r_lo: float, r_hi: float,
               nz: int, nr: int, dt: float = 1.0 / 365.0, n_steps: int = 0) -> "Grid":
        """Grid covering roughly ``[z_lo, z_hi] x [r_lo, r_hi]`` with ``x0`` on a node.

        The spacing is that of the requested box; the box is shifted (not
        stretched) so the initial state coincides with a lattice node, which
        removes interpolation error at the point where prices are read.
        """
        def axis(c, lo, hi, n):
            h = (hi - lo) / (n - 1)
            k = int(round((c - lo) / h))
            k = min(max(k, 1), n - 2)
            start = c - k * h
            return start, start + (n - 1) * h

        zl, zh = axis(x0[0], z_lo, z_hi, nz)
        rl, rh = axis(x0[1], r_lo, r_hi, nr)
        return cls(zl, zh, rl, rh, nz, nr, dt, n_steps)

    @property
    def hz(self) -> float:
        return (self.z_max - self.z_min) / (self.nz - 1)

    @property
    def hr(self) -> float:
        return (self.r_max - self.r_min) / (self.nr - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nr)

    @property
    def size(self) -> int:
        return self.nz * self.nr

    @property
    def z(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.nz)

    @property
    def r(self) -> np.ndarray:
        return np.linspace(self.r_min, self.r_max, self.nr)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(Z, R)`` node coordinates, each of shape ``(nz, nr)``."""
        return np.meshgrid(self.z, self.r, indexing="ij")

    @property
    def dt_days(self) -> float:
        return self.dt * 365.0

    def steps_of_days(self, days) -> np.ndarray:
        """Time-step index of each maturity in days; maturities must lie on the lattice."""
        d = np.atleast_1d(np.asarray(days, dtype=float))
        k = d / self.dt_days
        steps = np.rint(k).astype(int)
        if np.any(np.abs(k - steps) > 1e-9) or np.any(steps < 1):
            raise ValueError(f"maturities {d[np.abs(k - steps) > 1e-9].tolist() or d.tolist()} days are off the "
                             f"{self.dt_days:g}-day time lattice")
        return steps

    def with_steps(self, n_steps: int) -> "Grid":
        return replace(self, n_steps=int(n_steps))

    def contains(self, z, r) -> bool:
        return bool(self.z_min <= z <= self.z_max and self.r_min <= r <= self.r_max)

    def locate(self, z, r):
        """Bilinear cell lookup.

        Returns ``(i, j, wz, wr)`` such that the point lies in the cell with
        lower-left node ``(i, j)`` at fractional offsets ``(wz, wr)``.  Points
        outside the domain are clamped onto it.  Works elementwise on arrays.
        """
        fz = (np.clip(z, self.z_min, self.z_max) - self.z_min) / self.hz
        fr = (np.clip(r, self.r_min, self.r_max) - self.r_min) / self.hr
        i = np.minimum(np.floor(fz).astype(int), self.nz - 2)
        j = np.minimum(np.floor(fr).astype(int), self.nr - 2)
        return i, j, fz - i, fr - j

    def interpolate(self, field: np.ndarray, z, r):
        """Bilinear interpolation of ``field`` (shape ``(nz, nr, ...)``) at points."""
        i, j, wz, wr = self.locate(z, r)
        if field.ndim > 2:
            extra = (slice(None),) * (field.ndim - 2)
            wz = np.expand_dims(wz, tuple(range(np.ndim(wz), np.ndim(wz) + field.ndim - 2)))
            wr = np.expand_dims(wr, tuple(range(np.ndim(wr), np.ndim(wr) + field.ndim - 2)))
        else:
            extra = ()
        f00 = field[(i, j) + extra]
        f10 = field[(i + 1, j) + extra]
        f01 = field[(i, j + 1) + extra]
        f11 = field[(i + 1, j + 1) + extra]
        return (1 - wz) * (1 - wr) * f00 + wz * (1 - wr) * f10 + (1 - wz) * wr * f01 + wz * wr * f11

    def delta_weights(self, z0: float, r0: float) -> np.ndarray:
        """Split a unit mass at ``(z0, r0)`` bilinearly over the enclosing nodes."""
        if not self.contains(z0, r0):
            raise ValueError(f"point ({z0}, {r0}) lies outside the grid domain")
        i, j, wz, wr = self.locate(z0, r0)
        w = np.zeros(self.shape)
        w[i, j] += (1 - wz) * (1 - wr)
        w[i + 1, j] += wz * (1 - wr)
        w[i, j + 1] += (1 - wz) * wr
        w[i + 1, j + 1] += wz * wr
        return w


def flatten(field: np.ndarray) -> np.ndarray:
    """``(nz, nr, ...)`` -> ``(nz*nr, ...)`` with node index ``i + nz*j``."""
    if field.ndim == 2:
        return field.ravel(order="F")
    return field.reshape((field.shape[0] * field.shape[1],) + field.shape[2:], order="F")


def unflatten(vec: np.ndarray, grid: Grid) -> np.ndarray:
    if vec.ndim == 1:
        return vec.reshape(grid.shape, order="F")
    return vec.reshape(grid.shape + vec.shape[1:], order="F")


def _check_field(field: np.ndarray, grid: Grid | None = None) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if field.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {field.shape}")
    if grid is not None and field.shape != grid.shape:
        raise ValueError(f"field shape {field.shape} does not match grid {grid.shape}")
    bad = ~np.isfinite(field)
    if bad.any():
        node = tuple(int(k) for k in np.argwhere(bad)[0])
        raise ValueError(f"non-finite field value at node {node}")
    return field


def fd_gradient(field: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, one-sided second-order differences on the edges."""
    f = _check_field(field, grid)
    dz = np.gradient(f, grid.hz, axis=0, edge_order=2)
    dr = np.gradient(f, grid.hr, axis=1, edge_order=2)
    return dz, dr


def _second_difference(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h**2
    # edge nodes carry the normal second difference of the adjacent
    # three-node stencil; this is the quantity the boundary policy freezes
    out[0] = (f[0] - 2.0 * f[1] + f[2]) / h**2
    out[-1] = (f[-1] - 2.0 * f[-2] + f[-3]) / h**2
    return np.moveaxis(out, 0, axis)


def fd_hessian(field: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dzz, drr, dzr)``.

    ``dzz``/``drr`` use the 3-point second difference (the one-sided 3-node
    stencil on the edges); ``dzr`` is the 4-point cross stencil inside, built
    as the composition of the two first-derivative operators.
    """
    f = _check_field(field, grid)
    dzz = _second_difference(f, grid.hz, 0)
    drr = _second_difference(f, grid.hr, 1)
    dzr = np.gradient(np.gradient(f, grid.hr, axis=1, edge_order=2), grid.hz, axis=0, edge_order=2)
    return dzz, drr, dzr


def boundary_curvature(anchor: np.ndarray) -> dict[str, np.ndarray]:
    """Normal (undivided) second differences of ``anchor`` on the four edges.

    Works for trailing extra axes (several fields at once).
    """
    a = anchor
    return {
        "z_lo": a[0] - 2.0 * a[1] + a[2],
        "z_hi": a[-1] - 2.0 * a[-2] + a[-3],
        "r_lo": a[:, 0] - 2.0 * a[:, 1] + a[:, 2],
        "r_hi": a[:, -1] - 2.0 * a[:, -2] + a[:, -3],
    }


def apply_frozen_curvature_boundary(field: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Overwrite the boundary ring so its normal curvature equals the anchor's.

    Rate-edge nodes (excluding corners) are filled first, then the log-price
    edges including the corners, which therefore follow the z-direction rule.
    Interior values are never touched.  Extra trailing axes are allowed.
    """
    field = np.asarray(field, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if field.shape != anchor.shape:
        raise ValueError(f"grid mismatch: field {field.shape} vs anchor {anchor.shape}")
    if field.shape[0] < 4 or field.shape[1] < 4:
        raise ValueError("frozen-curvature boundary needs at least 4 nodes per axis")
    k = boundary_curvature(anchor)
    out = field.copy()
    out[1:-1, 0] = k["r_lo"][1:-1] + 2.0 * out[1:-1, 1] - out[1:-1, 2]
    out[1:-1, -1] = k["r_hi"][1:-1] + 2.0 * out[1:-1, -2] - out[1:-1, -3]
    out[0] = k["z_lo"] + 2.0 * out[1] - out[2]
    out[-1] = k["z_hi"] + 2.0 * out[-2] - out[-3]
    return out


def boundary_mask(grid: Grid) -> np.ndarray:
    m = np.zeros(grid.shape, dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    return m
