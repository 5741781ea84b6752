"""Calibrating instruments: payoffs, implied volatilities, vegas and quote weighting.

Calls are written on the stock ``S = exp(z)``; caps on the short rate, whose
grid coordinate is the rescaled rate ``R * r``.  Model time is measured in
days/365 (the daily lattice); implied volatilities use a separate quoting
year fraction, days/``iv_basis`` (360 by default, the money-market
convention under which the tabulated benchmark volatilities were quoted).

Vega weights are sensitivities per unit of volatility, so after dividing
prices by them a pricing error of size ``e`` corresponds to an implied
volatility error of about ``e``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

DAYS_PER_YEAR = 365.0


class Kind(str, Enum):
    CALL = "call"
    CAP = "cap"

    @classmethod
    def parse(cls, text: str) -> "Kind":
        t = text.strip().lower().replace("_", "").replace("-", "")
        if t in ("call", "equitycall"):
            return cls.CALL
        if t in ("cap", "ratecap"):
            return cls.CAP
        raise ValueError(f"unknown instrument kind {text!r}")


@dataclass(frozen=True)
class Instrument:
    kind: Kind
    maturity_days: int
    strike: float
    notional: float = 1.0
    price: float = float("nan")
    iv: float | None = None
    vega_weight: float = 1.0

    def __post_init__(self):
        if self.maturity_days <= 0:
            raise ValueError("maturity must be positive")
        if self.notional <= 0:
            raise ValueError("notional must be positive")
        if self.kind is Kind.CALL and self.strike <= 0:
            raise ValueError("call strike must be positive")
        if not math.isnan(self.price) and self.price < 0:
            raise ValueError("price must be non-negative")
        if self.vega_weight <= 0:
            raise ValueError("vega weight must be positive")

    @property
    def maturity(self) -> float:
        """Maturity in model years (days / 365)."""
        return self.maturity_days / DAYS_PER_YEAR

    @property
    def scaled_price(self) -> float:
        return self.price / self.vega_weight

    def label(self) -> str:
        return f"{self.kind.value} K={self.strike:g} T={self.maturity_days}d"


@dataclass(frozen=True)
class QuoteSet:
    """Ordered calibrating quotes plus the market state needed to quote them."""

    instruments: tuple[Instrument, ...]
    spot: float
    short_rate: float = 0.0
    rate_scale: float = 100.0
    iv_basis: float = 360.0
    cap_model: str = "normal"
    prepared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "instruments", tuple(self.instruments))
        if len(self.instruments) == 0:
            raise ValueError("a quote set needs at least one instrument")
        days = [q.maturity_days for q in self.instruments]
        if any(b < a for a, b in zip(days, days[1:])):
            raise ValueError("instruments must be sorted by maturity")
        if self.rate_scale <= 0:
            raise ValueError("rate scale must be positive")
        if self.spot <= 0:
            raise ValueError("spot must be positive")
        if self.cap_model not in ("normal", "lognormal"):
            raise ValueError("cap_model must be 'normal' or 'lognormal'")

    def __len__(self):
        return len(self.instruments)

    @property
    def prices(self) -> np.ndarray:
        return np.array([q.price for q in self.instruments])

    @property
    def weights(self) -> np.ndarray:
        return np.array([q.vega_weight for q in self.instruments])

    @property
    def scaled_prices(self) -> np.ndarray:
        return self.prices / self.weights

    @property
    def maturity_days(self) -> np.ndarray:
        return np.array([q.maturity_days for q in self.instruments], dtype=int)

    def with_instruments(self, instruments) -> "QuoteSet":
        return replace(self, instruments=tuple(instruments))

    def iv_years(self, instr: Instrument) -> float:
        return instr.maturity_days / self.iv_basis


# --------------------------------------------------------------------------
# payoffs


def payoff(instr: Instrument, z, r_scaled, rate_scale: float = 100.0, grid=None):
    """Payoff on the (possibly truncated) domain; vectorised over ``z``/``r``.

    With a grid the coordinates are clamped to the domain, which is the
    bounded-payoff approximation: beyond the edge the payoff is frozen at its
    boundary value.
    """
    z = np.asarray(z, dtype=float)
    r_scaled = np.asarray(r_scaled, dtype=float)
    if grid is not None:
        z = np.clip(z, grid.z_min, grid.z_max)
        r_scaled = np.clip(r_scaled, grid.r_min, grid.r_max)
    if instr.kind is Kind.CALL:
        return np.maximum(np.exp(z) - instr.strike, 0.0) + 0.0 * r_scaled
    return instr.notional * instr.maturity * np.maximum(r_scaled / rate_scale - instr.strike, 0.0) + 0.0 * z


def payoff_on_grid(instr: Instrument, grid, rate_scale: float = 100.0) -> np.ndarray:
    Z, R = grid.mesh()
    return payoff(instr, Z, R, rate_scale)


# --------------------------------------------------------------------------
# Black and Bachelier


def _positive(**kw):
    for k, v in kw.items():
        if not (v > 0):
            raise ValueError(f"{k} must be positive, got {v}")


def bs_price(forward, K, T, vol, discount):
    """Black formula on the forward."""
    _positive(forward=forward, K=K, T=T, vol=vol, discount=discount)
    sd = vol * math.sqrt(T)
    d1 = math.log(forward / K) / sd + 0.5 * sd
    return discount * (forward * norm.cdf(d1) - K * norm.cdf(d1 - sd))


def bs_vega(forward, K, T, vol, discount):
    """d(price)/d(vol), per unit of volatility."""
    _positive(forward=forward, K=K, T=T, vol=vol, discount=discount)
    sd = vol * math.sqrt(T)
    d1 = math.log(forward / K) / sd + 0.5 * sd
    return discount * forward * norm.pdf(d1) * math.sqrt(T)


class OutOfBandError(ValueError):
    """Price outside the no-arbitrage band of the pricing formula."""


def _solve_vol(price_fn, target, lo_price, hi_price, lo=1e-8, hi=5.0):
    if not (lo_price < target < hi_price):
        raise OutOfBandError(f"price {target} outside no-arbitrage band ({lo_price}, {hi_price})")
    while price_fn(hi) < target:
        hi *= 2.0
        if hi > 1e4:
            raise OutOfBandError("implied volatility not bracketed")
    return brentq(lambda s: price_fn(s) - target, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def bs_implied_vol(price, forward, K, T, discount):
    _positive(forward=forward, K=K, T=T, discount=discount)
    lower = discount * max(forward - K, 0.0)
    upper = discount * forward
    return _solve_vol(lambda s: bs_price(forward, K, T, s, discount), price, lower, upper)


def bachelier_price(forward, K, T, vol, discount):
    """Normal-model call price (vol in absolute rate units per sqrt(year))."""
    _positive(T=T, vol=vol, discount=discount)
    sd = vol * math.sqrt(T)
    d = (forward - K) / sd
    return discount * ((forward - K) * norm.cdf(d) + sd * norm.pdf(d))


def bachelier_vega(forward, K, T, vol, discount):
    _positive(T=T, vol=vol, discount=discount)
    sd = vol * math.sqrt(T)
    return discount * math.sqrt(T) * norm.pdf((forward - K) / sd)


def bachelier_implied_vol(price, forward, K, T, discount):
    _positive(T=T, discount=discount)
    lower = discount * max(forward - K, 0.0)
    return _solve_vol(lambda s: bachelier_price(forward, K, T, s, discount), price, lower, np.inf, hi=1.0)


# --------------------------------------------------------------------------
# quote conventions


def _unit_price_and_scale(instr: Instrument, quotes: QuoteSet):
    """Return (forward, strike, T, discount, multiplier) for the quoting formula."""
    T = quotes.iv_years(instr)
    disc = math.exp(-quotes.short_rate * T)
    if instr.kind is Kind.CALL:
        return quotes.spot * math.exp(quotes.short_rate * T), instr.strike, T, disc, 1.0
    return quotes.short_rate, instr.strike, T, disc, instr.notional * instr.maturity


def implied_vol(instr: Instrument, price: float, quotes: QuoteSet) -> float:
    F, K, T, D, mult = _unit_price_and_scale(instr, quotes)
    if instr.kind is Kind.CAP and quotes.cap_model == "normal":
        return bachelier_implied_vol(price / mult, F, K, T, D)
    return bs_implied_vol(price / mult, F, K, T, D)


def model_price(instr: Instrument, vol: float, quotes: QuoteSet) -> float:
    F, K, T, D, mult = _unit_price_and_scale(instr, quotes)
    if instr.kind is Kind.CAP and quotes.cap_model == "normal":
        return mult * bachelier_price(F, K, T, vol, D)
    return mult * bs_price(F, K, T, vol, D)


def vega(instr: Instrument, vol: float, quotes: QuoteSet) -> float:
    F, K, T, D, mult = _unit_price_and_scale(instr, quotes)
    if instr.kind is Kind.CAP and quotes.cap_model == "normal":
        return mult * bachelier_vega(F, K, T, vol, D)
    return mult * bs_vega(F, K, T, vol, D)


class QuoteRejected(ValueError):
    pass


def prepare_quotes(raw: QuoteSet, unit_weights: bool = False, min_vega: float = 1e-12) -> QuoteSet:
    """Fill implied vols and vega weights.

    Weights depend only on the quoted price, so the operation is idempotent.
    With ``unit_weights`` every weight is 1 and targets are the raw prices.
    """
    out = []
    for q in raw.instruments:
        if math.isnan(q.price):
            raise QuoteRejected(f"{q.label()}: missing market price")
        try:
            iv = implied_vol(q, q.price, raw)
        except OutOfBandError as exc:
            raise QuoteRejected(f"{q.label()}: {exc}") from exc
        w = 1.0 if unit_weights else vega(q, iv, raw)
        if not (w > min_vega) or not math.isfinite(w):
            raise QuoteRejected(f"{q.label()}: vega {w} too small to weight")
        out.append(replace(q, iv=iv, vega_weight=w))
    return replace(raw, instruments=tuple(out), prepared=True)


def report_ivs(quotes: QuoteSet, prices) -> np.ndarray:
    """Implied vols of model prices (nan where a price is out of band)."""
    ivs = []
    for q, p in zip(quotes.instruments, prices):
        try:
            ivs.append(implied_vol(q, float(p), quotes))
        except (OutOfBandError, ValueError):
            ivs.append(float("nan"))
    return np.array(ivs)


# --------------------------------------------------------------------------
# file format

CSV_HEADER = ["kind", "maturity_days", "strike", "notional", "price", "iv"]


def read_instruments(path) -> list[Instrument]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for n, row in enumerate(reader, start=2):
            try:
                iv = row["iv"].strip()
                rows.append(
                    Instrument(
                        kind=Kind.parse(row["kind"]),
                        maturity_days=int(row["maturity_days"]),
                        strike=float(row["strike"]),
                        notional=float(row["notional"] or 1.0),
                        price=float(row["price"]) if row["price"].strip() else float("nan"),
                        iv=float(iv) if iv else None,
                    )
                )
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return sorted(rows, key=lambda q: q.maturity_days)


def write_instruments(path, instruments) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for q in instruments:
            w.writerow([
                q.kind.value,
                q.maturity_days,
                repr(float(q.strike)),
                repr(float(q.notional)),
                repr(float(q.price)),
                "" if q.iv is None else repr(float(q.iv)),
            ])
