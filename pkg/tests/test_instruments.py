from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sotcal.instruments import (
    Instrument,
    Kind,
    OutOfBandError,
    QuoteRejected,
    QuoteSet,
    bachelier_implied_vol,
    bachelier_price,
    bs_implied_vol,
    bs_price,
    bs_vega,
    implied_vol,
    model_price,
    payoff,
    prepare_quotes,
    read_instruments,
    vega,
    write_instruments,
)


def test_black_reference_value():
    # textbook at-the-money value, F = K = 100, one year, 20% vol
    assert bs_price(100.0, 100.0, 1.0, 0.2, 1.0) == pytest.approx(7.965567455405804, rel=1e-12)


def test_bachelier_atm_closed_form():
    sd = 0.01 * math.sqrt(0.5)
    assert bachelier_price(0.02, 0.02, 0.5, 0.01, 1.0) == pytest.approx(sd / math.sqrt(2 * math.pi), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(60.0, 140.0), st.floats(0.05, 2.0), st.floats(0.05, 1.0))
def test_black_implied_vol_round_trip(K, T, vol):
    F, D = 100.0, 0.98
    p = bs_price(F, K, T, vol, D)
    if p - D * max(F - K, 0) < 1e-10:   # too deep to invert in double precision
        return
    assert bs_implied_vol(p, F, K, T, D) == pytest.approx(vol, abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.01, 0.05), st.floats(0.1, 2.0), st.floats(0.002, 0.03))
def test_bachelier_implied_vol_round_trip(K, T, vol):
    p = bachelier_price(0.02, K, T, vol, 0.99)
    if p - 0.99 * max(0.02 - K, 0) < 1e-12:
        return
    assert bachelier_implied_vol(p, 0.02, K, T, 0.99) == pytest.approx(vol, abs=1e-8)


def test_vega_matches_finite_difference():
    F, K, T, vol, D = 100.0, 110.0, 0.5, 0.3, 0.99
    h = 1e-6
    fd = (bs_price(F, K, T, vol + h, D) - bs_price(F, K, T, vol - h, D)) / (2 * h)
    assert bs_vega(F, K, T, vol, D) == pytest.approx(fd, rel=1e-7)


def test_out_of_band_price():
    with pytest.raises(OutOfBandError):
        bs_implied_vol(150.0, 100.0, 100.0, 1.0, 1.0)


def _quotes(**kw):
    ins = [Instrument(Kind.CALL, 60, 92.0), Instrument(Kind.CAP, 92, 0.01, notional=1e7)]
    return QuoteSet(ins, spot=92.0, short_rate=0.025, **kw)


def test_quote_conventions_use_iv_basis():
    q = _quotes()
    call, cap = q.instruments
    T = 60 / 360
    F = 92.0 * math.exp(0.025 * T)
    assert model_price(call, 0.4, q) == pytest.approx(bs_price(F, 92.0, T, 0.4, math.exp(-0.025 * T)))
    # caps: Bachelier on the short rate, scaled by notional and accrual (days/365)
    Tc = 92 / 360
    expected = 1e7 * (92 / 365) * bachelier_price(0.025, 0.01, Tc, 0.012, math.exp(-0.025 * Tc))
    assert model_price(cap, 0.012, q) == pytest.approx(expected)
    for instr, vol in ((call, 0.4), (cap, 0.012)):
        assert implied_vol(instr, model_price(instr, vol, q), q) == pytest.approx(vol, abs=1e-10)


def test_prepare_quotes_weights_and_idempotence():
    q = _quotes()
    raw = q.with_instruments([
        Instrument(Kind.CALL, 60, 92.0, price=model_price(q.instruments[0], 0.45, q)),
        Instrument(Kind.CAP, 92, 0.01, notional=1e7, price=model_price(q.instruments[1], 0.011, q)),
    ])
    prep = prepare_quotes(raw)
    assert prep.prepared
    np.testing.assert_allclose([i.iv for i in prep.instruments], [0.45, 0.011], atol=1e-10)
    assert prep.instruments[0].vega_weight == pytest.approx(vega(prep.instruments[0], 0.45, q))
    again = prepare_quotes(prep)
    np.testing.assert_array_equal(again.weights, prep.weights)
    unit = prepare_quotes(raw, unit_weights=True)
    np.testing.assert_array_equal(unit.weights, 1.0)
    np.testing.assert_array_equal(unit.scaled_prices, unit.prices)


def test_prepare_rejects_missing_and_arbitrage_prices():
    q = _quotes()
    with pytest.raises(QuoteRejected, match="missing"):
        prepare_quotes(q)
    bad = q.with_instruments([Instrument(Kind.CALL, 60, 92.0, price=500.0)])
    with pytest.raises(QuoteRejected, match="band"):
        prepare_quotes(bad)


def test_payoffs():
    call = Instrument(Kind.CALL, 30, 100.0)
    cap = Instrument(Kind.CAP, 73, 0.02, notional=1e6)
    assert payoff(call, math.log(110.0), 0.0) == pytest.approx(10.0)
    assert payoff(call, math.log(90.0), 0.0) == 0.0
    # rate grid coordinate 3.0 is 3% with R = 100
    assert payoff(cap, 0.0, 3.0, 100.0) == pytest.approx(1e6 * 0.2 * 0.01)


def test_quote_set_validation():
    with pytest.raises(ValueError, match="sorted"):
        QuoteSet([Instrument(Kind.CALL, 120, 92.0), Instrument(Kind.CALL, 60, 92.0)], spot=92.0)
    with pytest.raises(ValueError):
        QuoteSet([], spot=92.0)
    with pytest.raises(ValueError):
        Instrument(Kind.CALL, 0, 92.0)
    assert Kind.parse(" Rate_Cap ") is Kind.CAP


def test_csv_round_trip(tmp_path):
    ins = [
        Instrument(Kind.CAP, 92, 0.0125, notional=1e7, price=1234.5, iv=0.021),
        Instrument(Kind.CALL, 60, 92.0, price=7.25),
    ]
    path = tmp_path / "q.csv"
    write_instruments(path, ins)
    back = read_instruments(path)
    assert [b.maturity_days for b in back] == [60, 92]
    assert back[0].iv is None and back[1].iv == 0.021
    assert back[1].notional == 1e7 and back[0].price == 7.25


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("kind,maturity_days,strike\ncall,60,92\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_instruments(p)
    p.write_text("kind,maturity_days,strike,notional,price,iv\nput,60,92,1,3,\n")
    with pytest.raises(ValueError, match=":2:"):
        read_instruments(p)
