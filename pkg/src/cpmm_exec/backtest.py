"""Strategy replay on event data with gas/AMM fee accounting.

The investor trades at the observed pool-trade timestamps inside the
execution window (or on a fixed clock), sees the last recorded (Z, S, kappa)
strictly before each decision, and executes through the exact constant
product rate at that state. Investor fills do not feed back into the
recorded market.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .closed_form import ClosedFormStrategy, ControlParams
from .estimation import EstimationError, estimate_all, size_inventory
from .events import MS_PER_DAY, EventDataset, reconstruct_liquidity
from .pool import PoolState, execution_rate_exact

log = logging.getLogger(__name__)

MIN_TRADE = 1e-6  # Y units; smaller fills are skipped


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeeModel:
    gas_per_tx: float = 5.0
    amm_fee_bps: float = 1.0

    def __post_init__(self):
        if self.gas_per_tx < 0 or self.amm_fee_bps < 0:
            raise ValueError("fees must be non-negative")

    def amm_fee(self, delta_y: float, exec_rate: float) -> float:
        return self.amm_fee_bps * 1e-4 * abs(delta_y) * exec_rate


@dataclass(frozen=True)
class Fill:
    time: float  # days since window start
    delta_y: float
    exec_rate: float
    gas_fee: float
    amm_fee: float


@dataclass
class ExecutionReport:
    strategy: str
    y0: float
    Z0: float
    ZT: float
    fills: list
    times: np.ndarray
    inventory: np.ndarray
    cash: np.ndarray
    gross_pnl: float
    window: tuple = (0, 0)

    @property
    def trade_count(self) -> int:
        return len(self.fills)

    @property
    def gas_total(self) -> float:
        return float(sum(f.gas_fee for f in self.fills))

    @property
    def amm_total(self) -> float:
        return float(sum(f.amm_fee for f in self.fills))

    @property
    def fees_total(self) -> float:
        return self.gas_total + self.amm_total

    @property
    def net_pnl(self) -> float:
        return self.gross_pnl - self.fees_total

    def recompute_gross(self) -> float:
        xT = math.fsum(f.delta_y * f.exec_rate for f in self.fills)
        sold = math.fsum(f.delta_y for f in self.fills)
        return _gross(xT, sold, self.y0, self.Z0, self.ZT)

    def totals(self) -> dict:
        return {"strategy": self.strategy, "gross_pnl": self.gross_pnl, "net_pnl": self.net_pnl,
                "trade_count": self.trade_count, "gas_fees": self.gas_total,
                "amm_fees": self.amm_total, "fees": self.fees_total,
                "y0": self.y0, "yT": float(self.inventory[-1]), "Z0": self.Z0, "ZT": self.ZT,
                "window_start_ms": int(self.window[0]), "window_end_ms": int(self.window[1])}

    def to_dict(self) -> dict:
        return {**self.totals(), "fills": [asdict(f) for f in self.fills],
                "paths": {"t": self.times.tolist(), "inventory": self.inventory.tolist(),
                          "cash": self.cash.tolist()}}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


class MarketView:
    """Last-observation lookups on an event dataset."""

    def __init__(self, ds: EventDataset):
        sw = ds.swaps
        if len(sw) == 0:
            raise DataError("dataset has no swaps")
        self.ts = sw["timestamp_ms"].to_numpy(np.int64)
        self.Z = sw["rate"].to_numpy(float)
        depth = sw["depth"].to_numpy(float)
        if np.any(np.isnan(depth)):
            if len(ds.lp) == 0:
                raise DataError("swap depth missing and no LP events to reconstruct it")
            hist = reconstruct_liquidity(ds.lp)
            depth = np.array([d if not np.isnan(d) else hist.depth_at_rate(t, z)
                              for t, z, d in zip(self.ts, self.Z, depth)])
            if np.any(~(depth > 0)):
                raise DataError("reconstructed depth is zero at some swap")
        self.kappa = depth
        self.dy = sw["delta_y"].to_numpy(float)
        self.ots = ds.oracle["timestamp_ms"].to_numpy(np.int64)
        self.S = ds.oracle["rate"].to_numpy(float)

    def _before(self, ts_arr, t, what):
        i = np.searchsorted(ts_arr, t, side="left") - 1
        if np.any(i < 0):
            raise DataError(f"no {what} record strictly before {int(np.min(t))} ms")
        return i

    def state_before(self, t_ms):
        i = self._before(self.ts, t_ms, "pool")
        if self.ots.size == 0:
            raise DataError("missing oracle coverage")
        j = self._before(self.ots, t_ms, "oracle")
        return self.Z[i], self.S[j], self.kappa[i]

    def decision_times(self, window, clock=None) -> np.ndarray:
        start, end = window
        if end <= start:
            raise DataError("empty window")
        if clock is None:
            lo, hi = np.searchsorted(self.ts, [start, end], side="left")
            out = np.unique(self.ts[lo:hi])
        else:
            out = np.arange(start, end, int(clock), dtype=np.int64)
        if out.size == 0:
            raise DataError("no decision times inside the window")
        return out


SpeedFn = Callable[[float, float, float, float, float], float]


def _gross(cash, sold, y0, Z0, ZT):
    # x_T + y_T Z_T - y0 Z0 arranged so that a no-trade run gives y0 (Z_T - Z0) exactly
    return cash - sold * ZT + y0 * (ZT - Z0)


def run_strategy(ds, window, speed_fn: SpeedFn, y0: float, fee_model: FeeModel = FeeModel(),
                 name: str = "custom", clock=None, view: MarketView | None = None,
                 target: Callable | None = None) -> ExecutionReport:
    """Generic replay. ``speed_fn(t, y, Z, S, kappa)`` returns nu (Y/day, >0 sells).

    ``target(k, n, dt, y)``, if given, overrides the speed and returns the fill size directly.
    """
    view = view or MarketView(ds)
    start, end = window
    T = (end - start) / MS_PER_DAY
    dts = view.decision_times(window, clock)
    Z0 = float(view.state_before(start)[0]) if np.any(view.ts < start) else float(view.state_before(dts[0])[0])
    ZT = float(view.Z[np.searchsorted(view.ts, end, side="left") - 1])
    gaps = np.diff(np.append(dts, end)) / MS_PER_DAY
    Zs, Ss, Ks = view.state_before(dts)
    y, x = float(y0), 0.0
    fills, inv, cash = [], [y], [x]
    n = dts.size
    for k in range(n):
        t = (dts[k] - start) / MS_PER_DAY
        if target is not None:
            dy = target(k, n, gaps[k], y)
        else:
            dy = float(speed_fn(min(t, T), y, Zs[k], Ss[k], Ks[k])) * gaps[k]
        if abs(dy) >= MIN_TRADE:
            pool = PoolState.from_rate(Zs[k], Ks[k])
            rate = execution_rate_exact(pool, dy)
            fills.append(Fill(t, dy, rate, fee_model.gas_per_tx, fee_model.amm_fee(dy, rate)))
            y -= dy
            x += dy * rate
        inv.append(y)
        cash.append(x)
    times = np.append((dts - start) / MS_PER_DAY, T)
    gross = _gross(x, float(y0) - y, float(y0), Z0, ZT)
    return ExecutionReport(name, float(y0), Z0, ZT, fills, times, np.array(inv), np.array(cash),
                           float(gross), (int(start), int(end)))


@lru_cache(maxsize=16)
def _strategy_for(params: ControlParams, z_lo: float, z_hi: float) -> ClosedFormStrategy:
    return ClosedFormStrategy(params, z_lo, z_hi, mode="lattice")


def closed_form_speed_fn(params: ControlParams, Z0: float) -> SpeedFn:
    strat = _strategy_for(params, 0.5 * Z0, 2.0 * Z0)

    def fn(t, y, Z, S, kappa):
        return float(strat.speed(t, y, Z, S))

    return fn


def _check_params(params: ControlParams, window):
    T = (window[1] - window[0]) / MS_PER_DAY
    if not math.isclose(params.T, T, rel_tol=1e-9):
        raise ValueError(f"params.T={params.T} does not match the window horizon {T}")


def run_liquidation(ds, window, params: ControlParams, y0: float, fee_model: FeeModel = FeeModel(),
                    clock=None, view=None) -> ExecutionReport:
    _check_params(params, window)
    view = view or MarketView(ds)
    Z0 = float(view.state_before(window[0])[0])
    return run_strategy(ds, window, closed_form_speed_fn(params, Z0), y0, fee_model,
                        "liquidation", clock, view)


def run_speculative(ds, window, params: ControlParams, fee_model: FeeModel = FeeModel(),
                    clock=None, view=None) -> ExecutionReport:
    _check_params(params, window)
    view = view or MarketView(ds)
    Z0 = float(view.state_before(window[0])[0])
    return run_strategy(ds, window, closed_form_speed_fn(params, Z0), 0.0, fee_model,
                        "speculative", clock, view)


def run_twap(ds, window, y0: float, fee_model: FeeModel = FeeModel(), clock=None, view=None) -> ExecutionReport:
    """Constant speed over the active span; the last fill takes the remainder."""
    view = view or MarketView(ds)
    dts = view.decision_times(window, clock)
    gaps = np.diff(np.append(dts, window[1])).astype(float)
    share = gaps / gaps.sum()

    def target(k, n, dt, y):
        return y if k == n - 1 else y0 * share[k]

    return run_strategy(ds, window, None, y0, fee_model, "twap", clock, view, target=target)


def run_single_order(ds, window, y0: float, fee_model: FeeModel = FeeModel(), clock=None,
                     view=None) -> ExecutionReport:
    view = view or MarketView(ds)

    def target(k, n, dt, y):
        return y0 if k == 0 else 0.0

    return run_strategy(ds, window, None, y0, fee_model, "single_order", clock, view, target=target)


# ---------------------------------------------------------------- campaigns

@dataclass(frozen=True)
class CampaignConfig:
    in_sample_hours: float = 24.0
    horizon_hours: float = 2.0
    shift_hours: float = 2.0
    phi: float = 0.005
    alpha: float = 10.0
    phi_speculative: float = 0.001
    participation: float = 0.5
    fee_model: FeeModel = FeeModel()
    strategies: tuple = ("liquidation", "speculative", "twap", "single_order")
    jobs: int = 1


def campaign_windows(t0_ms: int, t1_ms: int, cfg: CampaignConfig) -> list[tuple[int, int, int]]:
    """(in_sample_start, exec_start, exec_end) triples covering [t0, t1]."""
    h = 3_600_000
    ins, hor, sh = (int(round(v * h)) for v in (cfg.in_sample_hours, cfg.horizon_hours, cfg.shift_hours))
    out = []
    s = t0_ms + ins
    while s + hor <= t1_ms:
        out.append((s - ins, s, s + hor))
        s += sh
    return out


def estimate_window(ds: EventDataset, view: MarketView, w0: int, w1: int):
    lo, hi = np.searchsorted(view.ts, [w0, w1], side="left")
    if hi - lo < 31:
        raise EstimationError("too few swaps in the in-sample window")
    ts = view.ts[lo:hi]
    Z = view.Z[lo:hi]
    j = np.searchsorted(view.ots, ts, side="right") - 1
    if np.any(j < 0):
        raise EstimationError("oracle does not cover the in-sample window")
    S = view.S[j]
    est = estimate_all(S, Z, float(np.mean(np.diff(ts))) / MS_PER_DAY, ts, view.kappa[lo:hi],
                       window={"start_ms": int(w0), "end_ms": int(w1)})
    volume = float(np.abs(view.dy[lo:hi]).sum())
    return est, volume


def window_reports(ds, view, triple, cfg: CampaignConfig):
    """Estimate on the in-sample window, then run every configured strategy on the horizon."""
    w0, s, e = triple
    est, volume = estimate_window(ds, view, w0, s)
    if not est.diagnostics["beta_defined"] or not est.beta_hat > 0:
        raise EstimationError("mean-reversion speed not identified")
    T = (e - s) / MS_PER_DAY
    y0 = size_inventory(volume, (s - w0) / MS_PER_DAY, T, cfg.participation)
    kappa0 = float(view.state_before(s)[2])
    base = ControlParams(phi=cfg.phi, alpha=cfg.alpha, eta=est.eta, T=T, beta=est.beta_hat,
                         gamma=est.gamma_hat, sigma=est.sigma_hat, kappa=kappa0)
    out = []
    for name in cfg.strategies:
        if name == "liquidation":
            rep = run_liquidation(ds, (s, e), base, y0, cfg.fee_model, view=view)
        elif name == "speculative":
            rep = run_speculative(ds, (s, e), replace(base, phi=cfg.phi_speculative), cfg.fee_model, view=view)
        elif name == "twap":
            rep = run_twap(ds, (s, e), y0, cfg.fee_model, view=view)
        elif name == "single_order":
            rep = run_single_order(ds, (s, e), y0, cfg.fee_model, view=view)
        else:
            raise ValueError(f"unknown strategy {name}")
        out.append(rep)
    return est, out


def run_window(ds, view, triple, cfg: CampaignConfig) -> list[dict]:
    return [rep.totals() for rep in window_reports(ds, view, triple, cfg)[1]]


def _run_window_safe(args):
    ds, triple, cfg = args
    try:
        return run_window(ds, MarketView(ds), triple, cfg), None
    except (EstimationError, DataError) as exc:
        return None, f"{triple[1]}: {exc}"


def summarize(rows: pd.DataFrame) -> pd.DataFrame:
    """Per-strategy table in the layout gross avg PnL / std / avg trades / avg fees."""
    if rows.empty:
        return pd.DataFrame(columns=["strategy", "gross_avg_pnl", "std_dev", "avg_num_trades",
                                     "avg_fees", "net_avg_pnl", "n_windows"])
    rows = rows.sort_values(["strategy", "window_start_ms"], kind="stable")
    g = rows.groupby("strategy", sort=True)
    out = pd.DataFrame({
        "gross_avg_pnl": g["gross_pnl"].mean(),
        "std_dev": g["gross_pnl"].std(ddof=1),
        "avg_num_trades": g["trade_count"].mean(),
        "avg_fees": g["fees"].mean(),
        "net_avg_pnl": g["net_pnl"].mean(),
        "n_windows": g["gross_pnl"].size(),
    }).reset_index()
    return out


@dataclass
class CampaignResult:
    rows: pd.DataFrame
    summary: pd.DataFrame
    skipped: list = field(default_factory=list)

    @property
    def n_windows(self) -> int:
        return int(self.rows["window_start_ms"].nunique()) if len(self.rows) else 0


def rolling_campaign(ds: EventDataset, cfg: CampaignConfig = CampaignConfig()) -> CampaignResult:
    t0, t1 = ds.span_ms
    triples = campaign_windows(t0, t1 + 1, cfg)
    if not triples:
        raise DataError("dataset shorter than one in-sample window plus horizon")
    args = [(ds, tr, cfg) for tr in triples]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(_run_window_safe, args))
    else:
        results = [_run_window_safe(a) for a in args]
    rows, skipped = [], []
    for res, err in results:
        if err is not None:
            skipped.append(err)
            log.warning("window skipped: %s", err)
        else:
            rows.extend(res)
    df = pd.DataFrame(rows)
    return CampaignResult(df, summarize(df), skipped)
