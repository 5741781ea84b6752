from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sotcal.grid import (
    Grid,
    apply_frozen_curvature_boundary,
    boundary_curvature,
    boundary_mask,
    fd_gradient,
    fd_hessian,
    flatten,
    unflatten,
)


def small_grid(nz=7, nr=5):
    return Grid(0.0, 1.0, -1.0, 1.0, nz, nr)


def test_flatten_is_z_fastest_and_round_trips():
    g = small_grid()
    f = np.arange(g.size, dtype=float).reshape(g.shape, order="F")
    v = flatten(f)
    # node (i, j) sits at i + nz * j
    assert v[3 + g.nz * 2] == f[3, 2]
    assert np.array_equal(unflatten(v, g), f)
    stacked = np.stack([f, 2 * f], axis=-1)
    assert np.array_equal(unflatten(flatten(stacked), g), stacked)


def test_fd_derivatives_exact_on_quadratics():
    g = Grid(-1.0, 2.0, 0.0, 3.0, 9, 11)
    Z, R = g.mesh()
    f = 1.5 * Z**2 - 0.7 * Z * R + 0.25 * R**2 + Z - 2 * R
    dz, dr = fd_gradient(f, g)
    dzz, drr, dzr = fd_hessian(f, g)
    np.testing.assert_allclose(dz, 3.0 * Z - 0.7 * R + 1, atol=1e-12)
    np.testing.assert_allclose(dr, -0.7 * Z + 0.5 * R - 2, atol=1e-12)
    np.testing.assert_allclose(dzz, 3.0, atol=1e-10)
    np.testing.assert_allclose(drr, 0.5, atol=1e-10)
    np.testing.assert_allclose(dzr, -0.7, atol=1e-10)


def test_fd_rejects_non_finite():
    g = small_grid()
    f = np.zeros(g.shape)
    f[2, 3] = np.nan
    with pytest.raises(ValueError, match=r"\(2, 3\)"):
        fd_gradient(f, g)


def test_frozen_curvature_matches_anchor_curvature_and_keeps_interior():
    rng = np.random.default_rng(3)
    anchor = rng.normal(size=(8, 6))
    field = rng.normal(size=(8, 6))
    out = apply_frozen_curvature_boundary(field, anchor)
    assert np.array_equal(out[1:-1, 1:-1], field[1:-1, 1:-1])
    ka, ko = boundary_curvature(anchor), boundary_curvature(out)
    for edge in ("z_lo", "z_hi"):
        np.testing.assert_allclose(ko[edge], ka[edge], atol=1e-12)
    for edge in ("r_lo", "r_hi"):
        np.testing.assert_allclose(ko[edge][1:-1], ka[edge][1:-1], atol=1e-12)


def test_frozen_curvature_preserves_linear_fields():
    g = small_grid(9, 9)
    Z, R = g.mesh()
    lin = 2 * Z - 3 * R + 1
    out = apply_frozen_curvature_boundary(np.where(boundary_mask(g), 99.0, lin), np.zeros(g.shape))
    np.testing.assert_allclose(out, lin, atol=1e-12)


def test_frozen_curvature_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        apply_frozen_curvature_boundary(np.zeros((5, 5)), np.zeros((5, 6)))


def test_around_puts_initial_state_on_a_node():
    x0 = (np.log(92.0), 2.5)
    g = Grid.around(x0, x0[0] - 1.2, x0[0] + 1.2, -5.0, 10.0, 50, 50)
    assert np.min(np.abs(g.z - x0[0])) < 1e-12
    assert np.min(np.abs(g.r - x0[1])) < 1e-12
    assert g.hz == pytest.approx(2.4 / 49)
    assert g.hr == pytest.approx(15.0 / 49)


def test_steps_of_days():
    g = Grid(0, 1, 0, 1, 5, 5, dt=2.0 / 365.0)
    assert g.steps_of_days([60, 120]).tolist() == [30, 60]
    with pytest.raises(ValueError, match="lattice"):
        g.steps_of_days([61])
    with pytest.raises(ValueError):
        g.steps_of_days([0])


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(0, 1, 0, 1, 2, 5)
    with pytest.raises(ValueError):
        Grid(1, 0, 0, 1, 5, 5)
    with pytest.raises(ValueError):
        Grid(0, 1, 0, 1, 5, 5, dt=0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-1.0, 1.0))
def test_interpolation_exact_on_bilinear_and_delta_weights_sum_to_one(z, r):
    g = small_grid()
    Z, R = g.mesh()
    f = 1 + 2 * Z - R + 0.5 * Z * R
    assert g.interpolate(f, z, r) == pytest.approx(1 + 2 * z - r + 0.5 * z * r, abs=1e-12)
    w = g.delta_weights(z, r)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w >= 0)
    # the split mass reproduces the point's coordinates
    assert np.sum(w * Z) == pytest.approx(z, abs=1e-12)
    assert np.sum(w * R) == pytest.approx(r, abs=1e-12)


def test_delta_weights_outside():
    with pytest.raises(ValueError, match="outside"):
        small_grid().delta_weights(2.0, 0.0)
