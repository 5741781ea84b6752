from __future__ import annotations

import csv
import json
from importlib import resources

import numpy as np
import pytest

from sotcal import io
from sotcal.cli import main
from sotcal.instruments import Kind, read_instruments

DATA = resources.files("sotcal") / "data"


def tiny_config(**calibration) -> dict:
    cal = {"variant": "joint", "eps1": 1e-4, "eps2": 1e-8, "bounds": [0.05, 1.0, 4.0, 64.0], "rho_ref": "reference"}
    cal.update(calibration)
    return {
        "name": "tiny",
        "market": "rates",
        "initial": {"spot": 92.0, "state2": 0.025},
        "grid": {"nz": 24, "nr": 24, "z_halfwidth": 1.2, "r_min": -0.05, "r_max": 0.10, "dt_days": 1},
        "generating": {"family": "hw_cev", "params": {"sigma": 0.6, "gamma": 0.95, "rho": -0.4, "sigma_r": 0.04,
                                                       "a": 0.05, "r0": 0.025}},
        "reference": {"family": "hw_cev", "params": {"sigma": 0.9, "gamma": 0.89, "rho": -0.2, "sigma_r": 0.04,
                                                      "a": 0.05, "r0": 0.025}},
        "instruments": {"calls": {"maturities_days": [10, 20], "strikes": [88, 96]}},
        "calibration": cal,
        "mc": {"n_paths": 20000, "seed": 11, "keep_paths": 2},
    }


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(tiny_config()))
    return p


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(tiny_config()))
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(d / "q.csv")]) == 0
    assert main(["calibrate", "--config", str(cfg), "--instruments", str(d / "q.csv"), "--out", str(d / "res"),
                 "--export-every", "5"]) == 0
    return d


def test_bundled_configs_validate():
    for name in ("hwcev_synthetic", "lsv_good", "lsv_bad", "market32"):
        cfg = io.load_config(DATA / f"{name}.json")
        setup = io.build_setup(cfg)
        assert setup.grid.contains(*setup.x0)


def test_config_errors():
    bad = tiny_config()
    bad["grid"]["nz"] = 2
    with pytest.raises(io.ConfigError, match="grid/nz"):
        io.validate_config(bad)
    bad = tiny_config(variant="lsv")
    with pytest.raises(io.ConfigError, match="lsv"):
        io.validate_config(bad)
    bad = tiny_config()
    bad["calibration"]["bogus"] = 1
    with pytest.raises(io.ConfigError):
        io.validate_config(bad)
    bad = tiny_config()
    bad["initial"]["state2"] = 0.5
    with pytest.raises(io.ConfigError, match="inside"):
        io.build_setup(bad)


def test_overrides_and_hash():
    cfg = tiny_config()
    out = io.apply_overrides(cfg, grid="30,20", variant="full_seq", bounds="0.01,2,1,100", seed=5)
    assert out["grid"]["nz"] == 30 and out["grid"]["nr"] == 20
    assert out["calibration"]["variant"] == "full-seq"
    assert out["calibration"]["bounds"] == [0.01, 2.0, 1.0, 100.0]
    assert out["mc"]["seed"] == 5
    assert cfg["grid"]["nz"] == 24
    assert io.config_hash(cfg) == io.config_hash(json.loads(json.dumps(cfg)))
    assert io.config_hash(cfg) != io.config_hash(out)


def test_gen_synthetic_is_byte_identical(cfg_path, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["gen-synthetic", "--config", str(cfg_path), "--out", str(a)]) == 0
    assert main(["gen-synthetic", "--config", str(cfg_path), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_instruments(a)
    assert [(q.maturity_days, q.strike) for q in rows] == [(10, 88.0), (10, 96.0), (20, 88.0), (20, 96.0)]
    assert all(q.iv is not None and 0.3 < q.iv < 0.7 for q in rows)


def test_result_round_trip(calibrated):
    res, meta = io.load_result(calibrated / "res")
    assert res.converged
    assert meta["grid"].shape == (24, 24)
    assert meta["config_hash"] == io.config_hash(tiny_config())
    again = calibrated / "copy"
    setup = io.build_setup(tiny_config())
    quotes = io.load_quotes(setup, calibrated / "res" / "instruments.csv")
    io.save_result(again, res, setup, quotes, meta["grid"])
    back, _ = io.load_result(again)
    assert io.results_equal(res, back)
    with open(calibrated / "res" / "ivs.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[-1].startswith("# config_hash=")
    with open(calibrated / "res" / "surfaces.csv") as fh:
        reader = csv.reader(fh)
        assert next(reader) == io.SURFACE_HEADER


def test_compare_with_itself_is_zero(calibrated, tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["compare", str(calibrated / "res"), str(calibrated / "res"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.count("0.000e+00") == 5
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r[f]) == 0.0 for r in rows for f in ("alpha1", "alpha2", "beta11", "beta12", "beta22"))


def test_compare_against_generating(calibrated, tmp_path):
    out = tmp_path / "g.csv"
    cfg = calibrated / "cfg.json"
    assert main(["compare", str(calibrated / "res"), "--generating", "--config", str(cfg), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert max(abs(float(r["beta11"])) for r in rows) > 0


def test_validate_mc(calibrated, tmp_path):
    out, paths = tmp_path / "mc.csv", tmp_path / "paths.csv"
    code = main(["validate-mc", "--config", str(calibrated / "cfg.json"), "--result", str(calibrated / "res"),
                 "--out", str(out), "--paths-out", str(paths)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("kind,maturity_days,strike,adi_price,mc_price,mc_se,z_score")
    assert len(lines) == 1 + 4 + 1
    assert paths.read_text().startswith("path,t_days,z,r_unscaled")


def test_seq_without_rho_ref_is_an_input_error(tmp_path, calibrated, capsys):
    cfg = tiny_config()
    del cfg["calibration"]["rho_ref"]
    p = tmp_path / "norho.json"
    p.write_text(json.dumps(cfg))
    code = main(["calibrate", "--config", str(p), "--instruments", str(calibrated / "q.csv"), "--variant", "seq",
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "rho_ref" in capsys.readouterr().err


def test_missing_files_and_bad_quotes_exit_with_input_error(tmp_path, cfg_path):
    assert main(["calibrate", "--config", str(tmp_path / "none.json"), "--instruments", "x", "--out", "y"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("kind,maturity_days,strike,notional,price,iv\ncall,10,92,1,500,\n")
    assert main(["calibrate", "--config", str(cfg_path), "--instruments", str(bad), "--out", str(tmp_path / "o")]) == 2
    off = tmp_path / "off.csv"
    off.write_text("kind,maturity_days,strike,notional,price,iv\ncall,10,92,1,3,\n")
    assert main(["calibrate", "--config", str(cfg_path), "--instruments", str(off), "--dt-days", "3",
                 "--out", str(tmp_path / "o")]) == 2


def test_unconverged_calibration_exits_one(cfg_path, calibrated, tmp_path):
    code = main(["calibrate", "--config", str(cfg_path), "--instruments", str(calibrated / "q.csv"), "--eps1", "1e-12",
                 "--out", str(tmp_path / "o")])
    cfg = json.loads(cfg_path.read_text())
    assert cfg["calibration"]["eps1"] == 1e-4
    assert code == 1


def test_bundled_market_file_ingests():
    cfg = io.load_config(DATA / "market32.json")
    setup = io.build_setup(cfg)
    q = io.load_quotes(setup, DATA / "market32.csv")
    assert len(q) == 32
    kinds = [i.kind for i in q.instruments]
    assert kinds.count(Kind.CALL) == 20 and kinds.count(Kind.CAP) == 12
    assert sorted(set(q.maturity_days.tolist())) == [88, 92, 179, 184]
    caps = [i for i in q.instruments if i.kind is Kind.CAP]
    assert all(i.notional == 1e7 for i in caps)
    assert np.all(np.isfinite([i.iv for i in q.instruments]))
    grid = setup.grid_for(q.instruments)
    assert grid.n_steps == 184
