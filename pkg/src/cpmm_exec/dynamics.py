"""Simulation of the oracle / pool-rate / depth environments.

Model I: oracle S is a driftless GBM and the pool rate Z mean-reverts to it,
    dS = sigma S dW,   dZ = beta (S - Z) dt + gamma Z dB.
Model II: Z and the depth kappa are independent driftless GBMs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd


class PositivityError(RuntimeError):
    """Euler step produced a non-positive pool rate; refine dt."""


@dataclass(frozen=True)
class Model1Params:
    sigma: float
    beta: float
    gamma: float
    S0: float
    Z0: float
    T: float
    kappa: float = 1e7

    def __post_init__(self):
        if self.sigma < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("sigma, beta, gamma must be non-negative")
        if min(self.S0, self.Z0, self.T, self.kappa) <= 0:
            raise ValueError("S0, Z0, T, kappa must be positive")


@dataclass(frozen=True)
class Model2Params:
    gamma: float
    varsigma: float
    Z0: float
    kappa0: float
    T: float

    def __post_init__(self):
        if self.gamma < 0 or self.varsigma < 0:
            raise ValueError("gamma, varsigma must be non-negative")
        if min(self.Z0, self.kappa0, self.T) <= 0:
            raise ValueError("Z0, kappa0, T must be positive")


@dataclass
class MarketPath:
    times: np.ndarray
    Z: np.ndarray
    kappa: np.ndarray
    S: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        self.kappa = np.broadcast_to(np.asarray(self.kappa, dtype=float), self.Z.shape).copy()
        if self.S is not None:
            self.S = np.asarray(self.S, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")
        arrays = [self.Z, self.kappa] + ([self.S] if self.S is not None else [])
        if any(a.shape != self.times.shape for a in arrays):
            raise ValueError("all series must match the time grid")
        if any(np.any(~(a > 0)) for a in arrays):
            raise ValueError("rates and depths must be positive")

    def to_frame(self) -> pd.DataFrame:
        S = self.S if self.S is not None else np.full_like(self.Z, np.nan)
        return pd.DataFrame({"t": self.times, "S": S, "Z": self.Z, "kappa": self.kappa})

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_csv(cls, path) -> "MarketPath":
        df = pd.read_csv(path, float_precision="round_trip")
        missing = {"t", "S", "Z", "kappa"} - set(df.columns)
        if missing:
            raise ValueError(f"path CSV missing columns {sorted(missing)}")
        S = df["S"].to_numpy(float)
        return cls(df["t"].to_numpy(float), df["Z"].to_numpy(float),
                   df["kappa"].to_numpy(float), None if np.all(np.isnan(S)) else S)


def time_grid(T: float, dt: float) -> np.ndarray:
    if not (dt > 0 and dt <= T * (1 + 1e-12)):
        raise ValueError(f"need 0 < dt <= T, got dt={dt}, T={T}")
    n = max(1, math.ceil(T / dt - 1e-9))
    return np.linspace(0.0, T, n + 1)


def make_streams(seed: int, n: int = 2) -> list[np.random.Generator]:
    """Independent counter-based (Philox) sub-streams derived from one seed."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_model1(params: Model1Params, dt: float, seed: int, return_noise: bool = False):
    t = time_grid(params.T, dt)
    h = np.diff(t)
    g_s, g_z = make_streams(seed)
    dW = g_s.standard_normal(h.size)
    dB = g_z.standard_normal(h.size)
    sq = np.sqrt(h)
    logS = np.concatenate([[0.0], np.cumsum(-0.5 * params.sigma**2 * h + params.sigma * sq * dW)])
    S = params.S0 * np.exp(logS)
    Z = np.empty_like(t)
    Z[0] = params.Z0
    drift_k = params.beta * h
    vol_k = params.gamma * sq * dB
    for i in range(h.size):
        z = Z[i]
        zn = z + drift_k[i] * (S[i] - z) + vol_k[i] * z
        if zn <= 0:
            raise PositivityError(f"Z became non-positive at step {i}; reduce dt={dt}")
        Z[i + 1] = zn
    path = MarketPath(t, Z, params.kappa, S)
    if return_noise:
        return path, dW, dB
    return path


def simulate_model2(params: Model2Params, dt: float, seed: int) -> MarketPath:
    t = time_grid(params.T, dt)
    h = np.diff(t)
    g_z, g_k = make_streams(seed)
    sq = np.sqrt(h)

    def gbm(x0, vol, g):
        inc = -0.5 * vol**2 * h + vol * sq * g.standard_normal(h.size)
        return x0 * np.exp(np.concatenate([[0.0], np.cumsum(inc)]))

    return MarketPath(t, gbm(params.Z0, params.gamma, g_z), gbm(params.kappa0, params.varsigma, g_k))


def expected_terminal_rate(Z, S, beta: float, t: float, T: float):
    """E[Z_T | Z_t=Z, S_t=S] for Model I (S is a martingale)."""
    if np.any(np.asarray(T) < np.asarray(t)):
        raise ValueError("need T >= t")
    w = np.exp(-beta * (T - t))
    return Z * w + S * (1.0 - w)


def params_dict(p) -> dict:
    return asdict(p)
