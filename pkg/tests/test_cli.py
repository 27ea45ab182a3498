import json

import numpy as np
import pandas as pd
import pytest

from cpmm_exec.cli import EXIT_CONVERGENCE, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from cpmm_exec.dynamics import Model1Params, simulate_model1
from cpmm_exec.events import synthetic_dataset, write_events


def run(*args):
    return main([str(a) for a in args])


def test_simulate_model1_example(tmp_path):
    out = tmp_path / "a"
    assert run("simulate", "--model", 1, "--sigma", 0.045, "--beta", 657.9, "--gamma", 0.034, "--T", 0.083,
               "--seed", 7, "--output", out) == EXIT_OK
    files = sorted(p.name for p in out.glob("path_*.csv"))
    assert files == ["path_seed7.csv"]
    df = pd.read_csv(out / files[0])
    assert list(df.columns) == ["t", "S", "Z", "kappa"] and len(df) == 5001
    # same seed twice -> identical file
    out2 = tmp_path / "b"
    run("simulate", "--model", 1, "--sigma", 0.045, "--beta", 657.9, "--gamma", 0.034, "--T", 0.083,
        "--seed", 7, "--output", out2)
    assert (out / files[0]).read_bytes() == (out2 / files[0]).read_bytes()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["config"]["seed"] == 7 and len(cfg["config_fingerprint"]) == 64


def test_simulate_model2_constant_kappa(tmp_path):
    assert run("simulate", "--model", 2, "--varsigma", 0, "--output", tmp_path) == EXIT_OK
    df = pd.read_csv(tmp_path / "path_seed0.csv")
    assert df["kappa"].nunique() == 1 and df["S"].isna().all()


def test_invalid_param_is_usage_error(tmp_path, capsys):
    assert run("simulate", "--sigma", -1, "--output", tmp_path) == EXIT_USAGE
    assert "sigma" in capsys.readouterr().err


def test_unknown_flag_exits_with_usage_code():
    with pytest.raises(SystemExit) as info:
        run("solve", "--bogus", 1)
    assert info.value.code == EXIT_USAGE


def test_config_precedence(tmp_path):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({"simulate": {"T": 0.01, "dt": 0.001, "n_paths": 2}}))
    run("simulate", "--config", cfgfile, "--n-paths", 1, "--output", tmp_path / "o")
    resolved = json.loads((tmp_path / "o" / "config.json").read_text())["config"]
    assert resolved["T"] == 0.01 and resolved["n_paths"] == 1
    assert len(list((tmp_path / "o").glob("path_*.csv"))) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run("simulate", "--config", bad, "--output", tmp_path / "p") == EXIT_USAGE


def make_events(tmp_path, params, dt, seed=0):
    ds, window = synthetic_dataset(simulate_model1(params, dt, seed))
    paths = write_events(ds, tmp_path / "events")
    return paths, window


def test_estimate_recovers_simulated_params(tmp_path):
    p = Model1Params(sigma=0.045, beta=657.9, gamma=0.034, S0=2690.0, Z0=2690.0, T=13 / 86400 * 20_000)
    paths, _ = make_events(tmp_path, p, 13 / 86400)
    assert run("estimate", "--swaps", paths["swaps"], "--oracle", paths["oracle"], "--output", tmp_path / "e") == 0
    rec = json.loads((tmp_path / "e" / "estimation.json").read_text())
    assert rec["sigma_hat"] == pytest.approx(0.045, rel=0.03)
    assert rec["gamma_hat"] == pytest.approx(0.034, rel=0.03)
    assert rec["beta_hat"] == pytest.approx(657.9, rel=0.25)
    assert len(rec["config_fingerprint"]) == 64


def test_estimate_constant_rates_and_bad_window(tmp_path):
    ts = np.arange(100) * 13_000
    sw = pd.DataFrame({"timestamp_ms": ts, "delta_y": 0.0, "delta_x": 0.0, "rate": 2000.0, "depth": 1e7})
    sw.to_csv(tmp_path / "s.csv", index=False)
    pd.DataFrame({"timestamp_ms": ts, "rate": 2000.0}).to_csv(tmp_path / "o.csv", index=False)
    assert run("estimate", "--swaps", tmp_path / "s.csv", "--oracle", tmp_path / "o.csv",
               "--output", tmp_path / "e") == EXIT_OK
    rec = json.loads((tmp_path / "e" / "estimation.json").read_text())
    assert rec["sigma_hat"] == 0 and rec["gamma_hat"] == 0 and rec["beta_hat"] is None
    assert any("beta_undefined" in f for f in rec["flags"])
    assert run("estimate", "--swaps", tmp_path / "s.csv", "--oracle", tmp_path / "o.csv",
               "--start-ms", 10**9, "--end-ms", 2 * 10**9, "--output", tmp_path / "f") == EXIT_DATA


def test_solve_model1_small_grid(tmp_path):
    out = tmp_path / "s"
    assert run("solve", "--nz", 41, "--nx", 41, "--nt", 100, "--output", out) == EXIT_OK
    for name in ("coefficients.csv", "solve_report.json", "speed_comparison.csv", "fields/theta2.csv"):
        assert (out / name).exists()
    rep = json.loads((out / "solve_report.json").read_text())
    assert rep["bounds"]["passed"]
    cmp = pd.read_csv(out / "speed_comparison.csv")
    assert set(cmp["y_tilde"]) == {-100.0, 0.0, 100.0}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_fingerprint"] == rep["config_fingerprint"]


def test_solve_degenerate_and_model2(tmp_path):
    assert run("solve", "--model", 1, "--method", "pde", "--beta", 0, "--gamma", 0, "--sigma", 0,
               "--nz", 201, "--nx", 3, "--nt", 2000, "--time-stretch", 12, "--output", tmp_path / "d") == 0
    rep = json.loads((tmp_path / "d" / "solve_report.json").read_text())
    assert rep["riccati_match"]["passed"]
    assert run("solve", "--model", 2, "--nz", 41, "--nx", 41, "--nt", 100, "--output", tmp_path / "m2") == 0
    assert json.loads((tmp_path / "m2" / "solve_report.json").read_text())["bounds"]["passed"]


def test_solve_picard_failure_exit_code(tmp_path, capsys):
    code = run("solve", "--method", "pde", "--nz", 11, "--nx", 11, "--nt", 5, "--picard-max-iter", 1,
               "--picard-tol", 1e-14, "--output", tmp_path)
    assert code == EXIT_CONVERGENCE
    assert "residual" in capsys.readouterr().err


@pytest.fixture(scope="module")
def one_window_events(tmp_path_factory):
    d = tmp_path_factory.mktemp("bt")
    p = Model1Params(sigma=0.03, beta=20.0, gamma=0.02, S0=2000.0, Z0=2000.0, T=26 / 24)
    paths, _ = make_events(d, p, 60 / 86400, seed=1)
    return paths


def test_backtest_one_window_all_strategies(tmp_path, one_window_events):
    p = one_window_events
    assert run("backtest", "--swaps", p["swaps"], "--oracle", p["oracle"], "--lp", p["lp"],
               "--output", tmp_path) == EXIT_OK
    reports = sorted(x.name for x in (tmp_path / "reports").glob("*.json"))
    assert len(reports) == 4
    assert {r.split("_", 2)[2] for r in reports} == {"liquidation.json", "speculative.json", "twap.json",
                                                     "single_order.json"}
    summ = pd.read_csv(tmp_path / "campaign_summary.csv")
    assert list(summ.columns[:5]) == ["strategy", "gross_avg_pnl", "std_dev", "avg_num_trades", "avg_fees"]
    rep = json.loads((tmp_path / "reports" / reports[0]).read_text())
    assert {"fills", "paths", "gross_pnl", "net_pnl", "config_fingerprint"} <= set(rep)


def test_backtest_single_strategy_and_determinism(tmp_path, one_window_events):
    p = one_window_events
    for sub in ("a", "b"):
        assert run("backtest", "--swaps", p["swaps"], "--oracle", p["oracle"], "--strategy", "twap",
                   "--output", tmp_path / sub) == EXIT_OK
    assert len(list((tmp_path / "a" / "reports").glob("*.json"))) == 1
    assert (tmp_path / "a" / "campaign_runs.csv").read_bytes() == (tmp_path / "b" / "campaign_runs.csv").read_bytes()


def test_backtest_schema_error_exit_code(tmp_path):
    (tmp_path / "s.csv").write_text("timestamp_ms,delta_y,delta_x,rate,depth\n1,1,1,oops,1\n")
    (tmp_path / "o.csv").write_text("timestamp_ms,rate\n1,2\n")
    assert run("backtest", "--swaps", tmp_path / "s.csv", "--oracle", tmp_path / "o.csv",
               "--output", tmp_path / "x") == EXIT_DATA
    assert run("backtest", "--swaps", tmp_path / "missing.csv", "--oracle", tmp_path / "o.csv",
               "--output", tmp_path / "y") == EXIT_DATA


def test_compare_small_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert run("compare", "--n-windows", 3, "--seed", 11, "--output", tmp_path / sub) == EXIT_OK
    a = pd.read_csv(tmp_path / "a" / "comparison_runs.csv")
    b = pd.read_csv(tmp_path / "b" / "comparison_runs.csv")
    pd.testing.assert_frame_equal(a, b)
    assert sorted(a["seed"].unique()) == [11, 12, 13]
    stats = json.loads((tmp_path / "a" / "comparison_stats.json").read_text())
    assert stats["n"] == 3


def test_fingerprint_ignores_output_location_but_not_parameters(tmp_path):
    fps = []
    for sub, sigma in (("a", 0.03), ("b", 0.03), ("c", 0.04)):
        run("simulate", "--T", 0.01, "--sigma", sigma, "--output", tmp_path / sub)
        fps.append(json.loads((tmp_path / sub / "config.json").read_text())["config_fingerprint"])
    assert fps[0] == fps[1] != fps[2]
