from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sotcal.grid import Grid  # noqa: E402
from sotcal.instruments import Instrument, Kind, QuoteSet, prepare_quotes  # noqa: E402
from sotcal.pde import ModelSurfaces  # noqa: E402
from sotcal.reference_models import HullWhiteCevParams, characteristics, discount_rate, price_quotes  # noqa: E402

GENERATING = HullWhiteCevParams(0.6, 0.95, -0.4, 0.04, 0.05, 0.025)
REFERENCE = HullWhiteCevParams(0.9, 0.89, -0.2, 0.04, 0.05, 0.025)


@dataclass
class SmallProblem:
    quotes: QuoteSet
    grid: Grid
    reference: ModelSurfaces
    generating: ModelSurfaces
    rate: np.ndarray
    x0: tuple


def make_small_problem(n: int = 30, days=(20, 40), strikes=(88.0, 96.0)) -> SmallProblem:
    """A few calls on a coarse grid: cheap enough for unit tests."""
    x0 = (float(np.log(92.0)), 2.5)
    grid = Grid.around(x0, x0[0] - 1.2, x0[0] + 1.2, -5.0, 10.0, n, n, n_steps=max(days))
    ins = [Instrument(Kind.CALL, d, K) for d in days for K in strikes]
    q = QuoteSet(ins, spot=92.0, short_rate=0.025)
    gen = characteristics(GENERATING, grid)
    rate = discount_rate(GENERATING, grid)
    prices = price_quotes(gen, q, grid, rate, x0)
    q = prepare_quotes(q.with_instruments([Instrument(i.kind, i.maturity_days, i.strike, price=float(p))
                                           for i, p in zip(ins, prices)]))
    return SmallProblem(q, grid, characteristics(REFERENCE, grid), gen, rate, x0)


@pytest.fixture(scope="session")
def small():
    return make_small_problem()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
