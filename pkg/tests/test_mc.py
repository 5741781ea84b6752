from __future__ import annotations

import numpy as np
import pytest

from sotcal.dual import reprice
from sotcal.grid import Grid
from sotcal.instruments import Instrument, Kind
from sotcal.mc import McConfig, mc_price, mc_prices, simulate_paths, write_paths_csv
from sotcal.optimisers import Characteristics
from sotcal.pde import ModelSurfaces


def test_prices_agree_with_adi_within_standard_errors(small):
    cfg = McConfig(n_paths=40_000, seed=7)
    est, se = mc_prices(small.generating, small.grid, small.x0, small.quotes.instruments, cfg)
    adi = reprice(small.generating, small.quotes, small.grid, small.rate, small.x0)
    assert np.all(se > 0)
    assert np.all(np.abs(est - adi) <= 3.0 * se)


def test_reproducible_and_seed_dependent(small):
    q = small.quotes.instruments[0]
    a = mc_price(small.generating, small.grid, small.x0, q, McConfig(n_paths=4000, seed=3))
    b = mc_price(small.generating, small.grid, small.x0, q, McConfig(n_paths=4000, seed=3))
    c = mc_price(small.generating, small.grid, small.x0, q, McConfig(n_paths=4000, seed=4))
    assert a == b
    assert a != c


def test_worker_count_does_not_change_results(small):
    q = small.quotes.instruments[1]
    one = mc_price(small.generating, small.grid, small.x0, q, McConfig(n_paths=3000, seed=1, block_size=1024))
    many = mc_price(small.generating, small.grid, small.x0, q,
                    McConfig(n_paths=3000, seed=1, block_size=1024, workers=3))
    assert one == many


def test_antithetic_pairs_and_reflection():
    g = Grid(-1.0, 1.0, -1.0, 1.0, 11, 11, dt=1 / 365, n_steps=30)
    c = Characteristics(0.0, 0.0, 4.0, 0.0, 4.0)     # wide diffusion: many paths hit the edges
    s = ModelSurfaces.from_characteristics(c, g, 1.0)
    ens = simulate_paths(s, g, (0.0, 0.0), McConfig(n_paths=2000, seed=5), 30, discount=False)
    z, r, _ = ens.states[30]
    assert ens.reflections > 0
    assert z.min() >= -1.0 and z.max() <= 1.0 and r.min() >= -1.0 and r.max() <= 1.0
    assert np.bincount(ens.pair).tolist() == [2] * 1000


def test_deterministic_drift_is_exact():
    # zero diffusion: z(t) = z0 + alpha1 t, and the rate integral is exact for a constant rate
    g = Grid(-1.0, 3.0, 0.0, 10.0, 9, 9, n_steps=40)
    c = Characteristics(0.5, 0.0, 0.0, 0.0, 0.0)
    s = ModelSurfaces.from_characteristics(c, g, 100.0)
    ens = simulate_paths(s, g, (0.0, 4.0), McConfig(n_paths=10, seed=0), 40)
    z, r, ir = ens.states[40]
    np.testing.assert_allclose(z, 0.5 * 40 * g.dt, atol=1e-12)
    np.testing.assert_allclose(ir, 0.04 * 40 * g.dt, rtol=1e-12)
    cap = Instrument(Kind.CAP, 40, 0.01, notional=100.0)
    est, se = mc_price(s, g, (0.0, 4.0), cap, McConfig(n_paths=10, seed=0))
    T = 40 / 365
    assert est == pytest.approx(np.exp(-0.04 * T) * 100.0 * T * 0.03, rel=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_validation_and_path_export(tmp_path, small):
    with pytest.raises(ValueError):
        McConfig(n_paths=0)
    with pytest.raises(ValueError, match="outside"):
        simulate_paths(small.generating, small.grid, (100.0, 0.0), McConfig(n_paths=10), 5)
    ens = simulate_paths(small.generating, small.grid, small.x0, McConfig(n_paths=100, seed=2), 10, keep_paths=3)
    out = tmp_path / "paths.csv"
    write_paths_csv(out, ens, small.grid)
    lines = out.read_text().splitlines()
    assert lines[0] == "path,t_days,z,r_unscaled"
    assert len(lines) == 1 + 3 * 11
    assert float(lines[1].split(",")[3]) == pytest.approx(0.025)
