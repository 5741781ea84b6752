from __future__ import annotations

import numpy as np
import pytest

from sotcal.grid import Grid
from sotcal.instruments import Instrument, Kind, QuoteSet, prepare_quotes
from sotcal.reference_models import (
    CevVasicekParams,
    HestonParams,
    HullWhiteCevParams,
    characteristics,
    discount_rate,
    params_from_dict,
    params_to_dict,
    parametric_calibrate,
    price_quotes,
    sequential_reference,
)

R = 100.0


def _grid(n_steps=0):
    return Grid(7.6, 8.8, 0.0, 5.0, 9, 11, n_steps=n_steps)


def test_cev_vasicek_characteristics_at_a_node():
    p = CevVasicekParams(0.4115, 0.9362, -0.2037, 0.0232, 0.0156, 0.2852)
    g = _grid()
    s = characteristics(p, g, R).at(0)
    i, j = 4, 3
    z, rs = g.z[i], g.r[j]
    vol = 0.4115 * np.exp((0.9362 - 1) * z)
    assert s.beta11[i, j] == pytest.approx(vol**2)
    assert s.alpha1[i, j] == pytest.approx(rs / R - 0.5 * vol**2)
    assert s.alpha2[i, j] == pytest.approx(R * 0.0156 * (0.2852 - rs / R))
    assert s.beta12[i, j] == pytest.approx(R * -0.2037 * 0.0232 * vol)
    assert s.beta22[i, j] == pytest.approx(R**2 * 0.0232**2)


def test_hull_white_drift_is_time_dependent():
    p = HullWhiteCevParams(0.6, 0.95, -0.4, 0.04, 0.05, 0.025)
    g = _grid(n_steps=30)
    s = characteristics(p, g, R)
    assert s.n_t == 30
    # at t = 0 the drift vanishes at r0: b(0) = a r0
    j = np.argmin(np.abs(g.r - 2.5))
    assert s.alpha2[0, 0, j] == pytest.approx(R * (0.05 * 0.025 - 0.05 * g.r[j] / R))
    t = 29 * g.dt
    b_t = 0.05 * 0.025 + 0.04**2 / 0.1 * (1 - np.exp(-0.1 * t))
    assert p.b(t) == pytest.approx(b_t)
    assert s.alpha2[29, 0, j] == pytest.approx(R * (b_t - 0.05 * g.r[j] / R))


def test_heston_characteristics():
    p = HestonParams(1.0, 0.05, 0.2, -0.4)
    g = Grid(3.0, 6.0, 0.0, 1.0, 7, 5)
    s = characteristics(p, g).at(0)
    assert s.beta22[0, 2] == pytest.approx(0.04 * 0.5)
    assert s.beta12[0, 2] == pytest.approx(-0.4 * 0.2 * 0.5)
    assert s.alpha2[0, 2] == pytest.approx(1.0 * (0.05 - 0.5))
    assert s.alpha1[0, 2] == pytest.approx(-0.25)
    np.testing.assert_array_equal(discount_rate(p, g), 0.0)


def test_parameter_validation_and_round_trip():
    with pytest.raises(ValueError):
        CevVasicekParams(0.4, 0.9, -1.5, 0.02, 0.01, 0.2)
    with pytest.raises(ValueError):
        HestonParams(-1.0, 0.05, 0.2, 0.0)
    p = HullWhiteCevParams(0.6, 0.95, -0.4, 0.04, 0.05, 0.025)
    d = params_to_dict(p)
    assert d["family"] == "hw_cev"
    assert params_from_dict(d) == p


def test_sequential_reference():
    p = CevVasicekParams(0.4, 0.93, -0.2, 0.02, 0.01, 0.2)
    s = characteristics(p, _grid(), R)
    same = sequential_reference(s, "reference")
    assert same.equals(s)
    pinned = sequential_reference(s, -0.3)
    # beta12 = R rho_ref sigma_r^2 in scaled units
    np.testing.assert_allclose(pinned.beta12, R * -0.3 * 0.02**2)
    np.testing.assert_array_equal(pinned.beta11, s.beta11)
    # a huge cross term violates beta11 > beta12^2 / beta22
    with pytest.raises(ValueError, match="rho_ref"):
        sequential_reference(s, 300.0)


def test_parametric_calibration_recovers_sigma():
    x0 = (np.log(92.0), 2.5)
    g = Grid.around(x0, x0[0] - 1.0, x0[0] + 1.0, -3.0, 8.0, 30, 20, n_steps=60)
    true = HullWhiteCevParams(0.6, 0.95, -0.4, 0.04, 0.05, 0.025)
    ins = [Instrument(Kind.CALL, 60, K) for K in (85.0, 92.0, 99.0)]
    q = QuoteSet(ins, spot=92.0, short_rate=0.025)
    prices = price_quotes(characteristics(true, g), q, g, discount_rate(true, g), x0)
    q = prepare_quotes(q.with_instruments([Instrument(Kind.CALL, 60, i.strike, price=float(p)) for i, p in zip(ins, prices)]))
    start = HullWhiteCevParams(0.5, 0.95, -0.4, 0.04, 0.05, 0.025)
    fit = parametric_calibrate(q, start, g, x0, free=["sigma"], gtol=1e-10)
    assert fit.params.sigma == pytest.approx(0.6, abs=1e-4)
    assert fit.objective < 1e-10
