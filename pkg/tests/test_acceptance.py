"""Acceptance criteria. Each test prints one PASS/FAIL line with the measured value and tolerance."""
import json
import math
import time

import numpy as np
import pytest

from cpmm_exec.backtest import (FeeModel, MarketView, run_liquidation, run_single_order, run_speculative,
                                run_strategy, run_twap)
from cpmm_exec.closed_form import (ClosedFormStrategy, ControlParams, PiecewiseStrategy, build_partition,
                                   riccati_A, riccati_A_phi0)
from cpmm_exec.dynamics import Model1Params, Model2Params, simulate_model1
from cpmm_exec.estimation import estimate_oracle_vol, estimate_pool_dynamics
from cpmm_exec.events import MS_PER_DAY, synthetic_dataset
from cpmm_exec.experiments import synthetic_comparison
from cpmm_exec.pde import (GridSpec, check_bounds_model1, check_bounds_model2, default_grid_model2,
                           frozen_riccati_field, merton_bound_coeffs, merton_rk4, solve_model1, solve_model2,
                           speed_numerical_model1)
from cpmm_exec.pool import (LiquidityProfile, PoolState, execution_cost_approx, swap_across_ticks,
                            unitary_execution_cost_exact)

from oracles import micro_step_replay, random_profile_order, riccati_reference, spearman

DT13 = 13 / 86400


@pytest.fixture
def report(capsys, request):
    t0 = time.perf_counter()

    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}  "
                  f"[{time.perf_counter() - t0:.1f} s]")
        return ok
    return emit


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_criterion_01_convexity_identity(report):
    rng = np.random.default_rng(1)
    worst_id, worst_bound = 0.0, -math.inf
    for _ in range(10_000):
        kappa = 10 ** rng.uniform(0, 9)
        y = 10 ** rng.uniform(-3, 9)
        dy = rng.uniform(-0.5, 0.5) * y
        p = PoolState.from_depth(kappa, y)
        exact = unitary_execution_cost_exact(p, dy)
        approx = execution_cost_approx(p.rate, kappa, dy)
        if dy == 0:
            continue
        worst_id = max(worst_id, rel(exact, approx * y / (y + dy)))
        if approx > 0:
            worst_bound = max(worst_bound, abs(approx - exact) / approx - abs(dy) / (y + dy))
    ok = worst_id <= 1e-12 and worst_bound <= 1e-12
    report(1, ok, f"identity rel err {worst_id:.2e} (tol 1e-12); bound excess {worst_bound:.2e} (<= 0)")
    assert ok


def test_criterion_02_riccati_oracle(report):
    worst = 0.0
    for phi in (0.0, 1e-5, 0.005, 0.05):
        for alpha in (5.0, 10.0):
            for zeta in np.geomspace(1e-3, 1e-1, 5):
                for tau in (1e-3, 0.01, 0.05, 0.1):
                    ref = riccati_reference(tau, zeta, phi, alpha, 1.0)
                    worst = max(worst, rel(float(riccati_A(tau, zeta, phi, alpha, 1.0)), ref))
    tau = np.linspace(0, 0.1, 21)
    worst0 = 0.0
    for alpha in (5.0, 10.0):
        for zeta in np.geomspace(1e-3, 1e-1, 5):
            sep = -1 / (1 / alpha + tau / zeta)
            worst0 = max(worst0, float(np.max(np.abs(riccati_A_phi0(tau, zeta, alpha, 1.0) - sep) / np.abs(sep))),
                         float(np.max(np.abs(riccati_A(tau, zeta, 0.0, alpha, 1.0) - sep) / np.abs(sep))))
    ok = worst <= 1e-8 and worst0 <= 1e-8
    report(2, ok, f"vs adaptive ODE {worst:.2e}, phi=0 form {worst0:.2e} (tol 1e-8)")
    assert ok


def test_criterion_03_piecewise_convergence(report, ref_params):
    cf = ClosedFormStrategy(ref_params, mode="exact")
    ts, ys, Ss = (0.0, 0.025, 0.05, 0.075), (-100.0, 0.0, 100.0), (1900.0, 2000.0, 2100.0)
    T_, Y, S, Z = np.meshgrid(ts, ys, Ss, np.linspace(1500, 2500, 61), indexing="ij")
    ref = cf.speed(T_, Y, Z, S)
    Ns = (10, 100, 1000)
    sups, jumps = [], []
    for N in Ns:
        pw = PiecewiseStrategy(ref_params, build_partition(1000, 4000, N, ref_params.kappa))
        sups.append(float(np.max(np.abs(pw.speed(T_, Y, Z, S) - ref))))
        jumps.append(max(pw.max_jump(t, y, s) for t in ts for y in (-100.0, 100.0) for s in Ss))
    slope = float(np.polyfit(np.log(Ns), np.log(jumps), 1)[0])
    ok = sups[0] > sups[1] > sups[2] and abs(slope + 1) <= 0.2
    report(3, ok, f"sup diff {[round(s, 3) for s in sups]} decreasing; jump slope {slope:.3f} (-1 +/- 0.2)")
    assert ok


def test_criterion_04_speed_panel(report, ref_fields, ref_params):
    cf = ClosedFormStrategy(ref_params, 1000.0, 4000.0)
    grid = np.linspace(1800, 2200, 41)
    Z, S = np.meshgrid(grid, grid, indexing="ij")
    lines, ok = [], True
    for y in (-100.0, 0.0, 100.0):
        num = speed_numerical_model1(ref_fields, 0.0, y, Z, S)
        ref = cf.speed(0.0, y, Z, S)
        diff = np.abs(num - ref)
        scale = float(np.max(np.abs(num)))
        diag = float(np.max(np.diag(diff))) / scale
        rho = spearman(np.abs(S - Z).ravel(), diff.ravel())
        ok &= diag <= 0.05 and rho > 0.8
        lines.append(f"y={y:+.0f}: diag {diag:.4f} rho {rho:.3f}")
    report(4, ok, "; ".join(lines) + " (diag <= 0.05 of max|nu|, rho > 0.8)")
    assert ok


def test_criterion_05_bounds(report, ref_fields, ref_params):
    r1 = check_bounds_model1(ref_fields, ref_params)
    merton = max(rel(a, b) for t in (0.0, 0.025, 0.05, 0.075, 0.099)
                 for a, b in zip(merton_bound_coeffs(ref_params, t), merton_rk4(ref_params, t)) if b != 0)
    c = ControlParams(phi=1e-5, alpha=5.0, eta=1.0, T=0.1)
    d = Model2Params(gamma=0.05, varsigma=0.05, Z0=2000.0, kappa0=1e7, T=0.1)
    f2 = solve_model2(d, c, default_grid_model2(2000.0, 1e7))
    r2 = check_bounds_model2(f2)
    lin = max(float(np.max(np.abs(f2.theta1))), float(np.max(np.abs(f2.theta0))))
    ok = r1.passed and merton <= 1e-8 and r2.passed and lin <= 1e-12
    report(5, ok, f"Model I envelope {r1.passed}, Merton vs RK4 {merton:.1e} (1e-8); "
                  f"Model II bounds {r2.passed}, |theta1|,|theta0| {lin:.1e} (1e-12)")
    assert ok


def test_criterion_06_degenerate_equivalence(report):
    p = ControlParams(phi=1e-5, alpha=5.0, eta=1.0, T=0.1, beta=0.0, gamma=0.0, sigma=0.0, kappa=1e7)
    f1 = solve_model1(p, GridSpec.log_spaced(1000, 4000, 201, 1000, 4000, 3, n_t=2000, time_stretch=12.0))
    d = Model2Params(gamma=0.0, varsigma=0.0, Z0=2000.0, kappa0=1e7, T=0.1)
    f2 = solve_model2(d, p, GridSpec.log_spaced(1000, 4000, 201, 2.5e6, 4e7, 5, n_t=2000, time_stretch=12.0))
    e1 = float(np.max(np.abs(f1.theta2 - frozen_riccati_field(f1))))
    e2 = float(np.max(np.abs(f2.theta2 - frozen_riccati_field(f2))))
    ok = e1 <= 1e-4 and e2 <= 1e-4
    report(6, ok, f"sup error Model I {e1:.2e}, Model II {e2:.2e} (tol 1e-4)")
    assert ok


def test_criterion_07_estimation_recovery(report):
    p = Model1Params(sigma=0.045, beta=657.9, gamma=0.034, S0=2690.0, Z0=2690.0, T=DT13 * 100_000)
    b, g, s = [], [], []
    for seed in range(20):
        path = simulate_model1(p, DT13, seed)
        est = estimate_pool_dynamics(path.Z, path.S, DT13)
        b.append(est.beta_hat)
        g.append(est.gamma_hat)
        s.append(estimate_oracle_vol(path.S, DT13).sigma_hat)
    eb, eg, es = rel(np.mean(b), 657.9), rel(np.mean(g), 0.034), rel(np.mean(s), 0.045)
    ok = eb <= 0.10 and eg <= 0.02 and es <= 0.02
    report(7, ok, f"beta rel err {eb:.4f} (0.10), gamma {eg:.4f} (0.02), sigma {es:.4f} (0.02)")
    assert ok


@pytest.fixture(scope="module")
def campaign():
    t0 = time.perf_counter()
    out = synthetic_comparison(n_windows=200, seed=0, fee_model=FeeModel(5.0, 1.0))
    return {**out, "seconds": time.perf_counter() - t0}


def test_criterion_08_strategy_ordering(report, campaign):
    st = campaign["stats"]
    means = campaign["summary"].set_index("strategy")["gross_avg_pnl"]
    z1, z2 = st["liquidation_minus_twap"]["z"], st["twap_minus_single_order"]["z"]
    ok = means["liquidation"] > means["twap"] > means["single_order"] and z1 >= 2 and z2 >= 2
    report(8, ok, f"means L {means['liquidation']:.0f} > TWAP {means['twap']:.0f} > single "
                  f"{means['single_order']:.0f}; separations {z1:.1f}, {z2:.1f} SE (>= 2); "
                  f"campaign {campaign['seconds']:.0f} s")
    assert ok


def test_criterion_09_speculative_sign(report, campaign):
    s = campaign["stats"]["speculative"]
    ok = s["mean"] > 0 and s["z"] >= 2
    report(9, ok, f"speculative mean {s['mean']:.0f}, {s['z']:.1f} SE (>= 2)")
    assert ok


def test_criterion_10_replay_integrity(report):
    path = simulate_model1(Model1Params(0.045, 657.9, 0.034, 2690.0, 2690.0, 0.02), DT13, 5)
    ds, w = synthetic_dataset(path)
    T = (w[1] - w[0]) / MS_PER_DAY
    p = ControlParams(phi=0.005, alpha=10.0, eta=DT13, T=T, beta=657.9, gamma=0.034, sigma=0.045, kappa=1e7)
    fee = FeeModel(5.0, 1.0)
    view = MarketView(ds)
    reps = [run_liquidation(ds, w, p, 500.0, fee, view=view), run_speculative(ds, w, p, fee, view=view),
            run_twap(ds, w, 500.0, fee, view=view), run_single_order(ds, w, 500.0, fee, view=view)]
    acct = max(abs(r.recompute_gross() - r.gross_pnl) / max(1.0, abs(r.gross_pnl)) for r in reps)
    acct_ok = acct <= 1e-9 and all(
        math.isclose(r.net_pnl, r.gross_pnl - r.gas_total - r.amm_total, abs_tol=1e-9) for r in reps)
    idle = run_strategy(ds, w, lambda t, y, Z, S, k: 0.0, 123.0, view=view)
    idle_ok = idle.trade_count == 0 and idle.gross_pnl == 123.0 * (idle.ZT - idle.Z0)
    again = run_liquidation(ds, w, p, 500.0, fee)
    det_ok = json.dumps(again.to_dict()) == json.dumps(reps[0].to_dict())
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        b, k, Z0, dy = random_profile_order(rng)
        Z1, dx = swap_across_ticks(LiquidityProfile(b, k), Z0, dy)
        Zr, dxr = micro_step_replay(b, k, Z0, dy, n=100_000)
        worst = max(worst, rel(dx, dxr), rel(Z1, Zr))
    ok = acct_ok and idle_ok and det_ok and worst <= 1e-8
    report(10, ok, f"accounting {acct:.1e}, no-trade {idle_ok}, determinism {det_ok}, "
                   f"micro-step {worst:.1e} (1e-8)")
    assert ok


# ---------------------------------------------------------------- large-alpha liquidation

def test_terminal_inventory_small_on_average(campaign):
    liq = campaign["rows"].query("strategy == 'liquidation'")
    frac = np.abs(liq["yT"] / liq["y0"])
    assert frac.mean() <= 1e-3


def test_pure_liquidation_terminal_inventory_per_seed():
    # without the arbitrage term the large terminal penalty empties the book on every path
    mp = Model1Params(0.045, 657.9, 0.034, 2689.2, 2690.77, 0.083, 22_561_783.0)
    worst = 0.0
    for seed in range(40):
        ds, w = synthetic_dataset(simulate_model1(mp, DT13, seed))
        cp = ControlParams(phi=0.005, alpha=10.0, eta=DT13, T=(w[1] - w[0]) / MS_PER_DAY, beta=0.0,
                           gamma=0.034, sigma=0.045, kappa=22_561_783.0)
        rep = run_liquidation(ds, w, cp, 14_877.0)
        worst = max(worst, abs(rep.inventory[-1]) / 14_877.0)
    assert worst <= 1e-3
