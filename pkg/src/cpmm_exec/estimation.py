"""In-sample calibration from discretized dynamics.

    dlog S = -sigma^2/2 dt + sigma sqrt(dt) u
    dlog Z = -gamma^2/2 dt + beta ((S - Z)/Z) dt + gamma sqrt(dt) e

sigma and gamma come from (residual) standard deviations; beta is the OLS
slope. Intercepts are reported as diagnostics only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MS_PER_DAY = 86_400_000.0
MIN_INCREMENTS = 30


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class OracleVolEstimate:
    sigma_hat: float
    se: float
    implied_intercept: float  # -sigma_hat^2 dt / 2
    mean_increment: float
    n: int


@dataclass(frozen=True)
class PoolDynamicsEstimate:
    beta_hat: float
    gamma_hat: float
    se_beta: float
    se_gamma: float
    intercept: float
    implied_intercept: float  # -gamma_hat^2 dt / 2, for comparison with `intercept`
    beta_defined: bool
    n: int


@dataclass(frozen=True)
class ExecutionCalibration:
    dt_bar: float  # days
    eta: float  # days
    kappa0: float
    n_trades: int


@dataclass
class EstimationResult:
    sigma_hat: float
    beta_hat: float
    gamma_hat: float
    dt_bar: float
    eta: float
    kappa0: float
    se: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.sigma_hat >= 0 and self.gamma_hat >= 0 and self.dt_bar > 0):
            raise EstimationError("need sigma_hat, gamma_hat >= 0 and dt_bar > 0")

    def to_record(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_record(), indent=2))
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _increments(series, dt):
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or np.any(~(x > 0)):
        raise EstimationError("series must be a 1-d array of positive rates")
    n = x.size - 1
    if n < MIN_INCREMENTS:
        raise EstimationError(f"need >= {MIN_INCREMENTS} increments, got {max(n, 0)}")
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (n,))
    if np.any(~(dt > 0)):
        raise EstimationError("dt must be positive")
    return x, dt


def estimate_oracle_vol(S, dt) -> OracleVolEstimate:
    """``dt`` is a scalar step (days) or one value per increment."""
    S, dt = _increments(S, dt)
    d = np.diff(np.log(S))
    z = d / np.sqrt(dt)
    n = z.size
    sig = float(np.std(z, ddof=1))
    dbar = float(np.mean(dt))
    return OracleVolEstimate(sig, sig / math.sqrt(2 * (n - 1)), -0.5 * sig**2 * dbar, float(np.mean(d)), n)


def estimate_pool_dynamics(Z, S, dt) -> PoolDynamicsEstimate:
    """Regress dlog Z on ((S - Z)/Z) dt with a free intercept.

    With per-increment ``dt`` the regression is weighted by 1/dt, which is
    plain OLS with intercept when dt is constant.
    """
    Z, dt = _increments(Z, dt)
    S = np.asarray(S, dtype=float)
    if S.shape != Z.shape or np.any(~(S > 0)):
        raise EstimationError("S must align with Z and be positive")
    y = np.diff(np.log(Z))
    x = (S[:-1] - Z[:-1]) / Z[:-1] * dt
    w = 1.0 / np.sqrt(dt)
    n = y.size
    dbar = float(np.mean(dt))
    degenerate = np.ptp(x / dt) <= 1e-12 * max(1.0, float(np.max(np.abs(x / dt))))
    if degenerate:
        X = (dt * w)[:, None]
        coef, *_ = np.linalg.lstsq(X, y * w, rcond=None)
        resid = y * w - X @ coef
        gam = float(np.sqrt(resid @ resid / (n - 1)))
        return PoolDynamicsEstimate(float("nan"), gam, float("nan"), gam / math.sqrt(2 * (n - 1)),
                                    float(coef[0] * dbar), -0.5 * gam**2 * dbar, False, n)
    X = np.column_stack([dt * w, x * w])
    coef, *_ = np.linalg.lstsq(X, y * w, rcond=None)
    resid = y * w - X @ coef
    s2 = resid @ resid / (n - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    gam = float(math.sqrt(s2))
    return PoolDynamicsEstimate(float(coef[1]), gam, float(math.sqrt(cov[1, 1])),
                                gam / math.sqrt(2 * (n - 2)), float(coef[0] * dbar),
                                -0.5 * gam**2 * dbar, True, n)


def calibrate_execution(trade_timestamps_ms, depths) -> ExecutionCalibration:
    ts = np.asarray(trade_timestamps_ms, dtype=float)
    if ts.size < 2:
        raise EstimationError("need at least two trades in the window")
    dep = np.asarray(depths, dtype=float)
    if dep.size == 0 or not dep[-1] > 0:
        raise EstimationError("need a positive depth observation")
    gaps = np.diff(np.sort(ts))
    dt_bar = float(np.mean(gaps)) / MS_PER_DAY
    if not dt_bar > 0:
        raise EstimationError("all trades share one timestamp")
    return ExecutionCalibration(dt_bar, dt_bar, float(dep[-1]), int(ts.size))


def size_inventory(in_sample_volume: float, in_sample_span: float, horizon: float,
                   participation: float) -> float:
    if not 0 <= participation <= 1:
        raise ValueError("participation must lie in [0, 1]")
    if in_sample_span <= 0 or horizon <= 0:
        raise ValueError("spans must be positive")
    return participation * in_sample_volume * horizon / in_sample_span


def estimate_all(S, Z, dt, trade_timestamps_ms, depths, window: dict | None = None) -> EstimationResult:
    """Full in-sample calibration on aligned S/Z samples plus trade times and depths."""
    vol = estimate_oracle_vol(S, dt)
    pool = estimate_pool_dynamics(Z, S, dt)
    ex = calibrate_execution(trade_timestamps_ms, depths)
    return EstimationResult(
        sigma_hat=vol.sigma_hat, beta_hat=pool.beta_hat, gamma_hat=pool.gamma_hat,
        dt_bar=ex.dt_bar, eta=ex.eta, kappa0=ex.kappa0,
        se={"sigma": vol.se, "beta": pool.se_beta, "gamma": pool.se_gamma},
        diagnostics={"oracle_mean_increment": vol.mean_increment,
                     "oracle_implied_intercept": vol.implied_intercept,
                     "pool_intercept": pool.intercept,
                     "pool_implied_intercept": pool.implied_intercept,
                     "beta_defined": pool.beta_defined},
        window=dict(window or {}),
        counts={"increments": pool.n, "trades": ex.n_trades},
    )
