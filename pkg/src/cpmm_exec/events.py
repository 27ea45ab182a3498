"""Event ingestion (swaps, LP updates, oracle ticks) and liquidity reconstruction."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dynamics import MarketPath
from .pool import LiquidityProfile

MS_PER_DAY = 86_400_000.0

SWAP_COLUMNS = ["timestamp_ms", "delta_y", "delta_x", "rate", "depth"]
LP_COLUMNS = ["timestamp_ms", "tick_lower", "tick_upper", "liquidity_delta"]
ORACLE_COLUMNS = ["timestamp_ms", "rate"]


class SchemaError(ValueError):
    def __init__(self, msg, path=None, row=None, column=None):
        super().__init__(msg)
        self.path, self.row, self.column = path, row, column


class LiquidityUnderflow(ValueError):
    def __init__(self, msg, timestamp_ms=None):
        super().__init__(msg)
        self.timestamp_ms = timestamp_ms


@dataclass(frozen=True)
class SwapEvent:
    timestamp_ms: int
    delta_y: float
    delta_x: float
    rate: float
    depth: float | None = None


@dataclass(frozen=True)
class LpEvent:
    timestamp_ms: int
    tick_lower: float
    tick_upper: float
    liquidity_delta: float


@dataclass(frozen=True)
class OracleTick:
    timestamp_ms: int
    rate: float


def _empty(columns):
    return pd.DataFrame({c: pd.Series(dtype="int64" if c == "timestamp_ms" else "float64") for c in columns})


@dataclass
class EventDataset:
    swaps: pd.DataFrame
    lp: pd.DataFrame
    oracle: pd.DataFrame
    report: dict = field(default_factory=dict)

    @property
    def n_events(self) -> int:
        return len(self.swaps) + len(self.lp) + len(self.oracle)

    def merged(self) -> pd.DataFrame:
        """All events in one frame, stably sorted by timestamp."""
        parts = []
        for kind, df in (("swap", self.swaps), ("lp", self.lp), ("oracle", self.oracle)):
            if len(df):
                parts.append(df.assign(kind=kind))
        if not parts:
            return pd.DataFrame({"timestamp_ms": pd.Series(dtype="int64"), "kind": pd.Series(dtype=object)})
        return pd.concat(parts, ignore_index=True).sort_values("timestamp_ms", kind="stable").reset_index(drop=True)

    @property
    def span_ms(self) -> tuple[int, int]:
        ts = [df["timestamp_ms"] for df in (self.swaps, self.oracle) if len(df)]
        if not ts:
            raise ValueError("dataset has no swaps or oracle ticks")
        allts = pd.concat(ts)
        return int(allts.min()), int(allts.max())


def _to_float(text: str) -> float:
    # Python's float() is correctly rounded; pandas' fast parser is not always
    try:
        return float(text) if text else math.nan
    except ValueError:
        return math.nan


def _read_csv(path, columns, optional=(), positive=(), name="") -> tuple[pd.DataFrame, dict]:
    if path is None:
        return _empty(columns), {"rows": 0, "rejected": 0, "non_monotone": 0}
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{name} file not found: {path}", path=str(path))
    if path.stat().st_size == 0:
        return _empty(columns), {"rows": 0, "rejected": 0, "non_monotone": 0}
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    missing = [c for c in columns if c not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}", path=str(path), column=missing[0])
    out = {}
    for c in columns:
        col = raw[c].str.strip()
        blank = col == ""
        num = pd.Series([_to_float(v) for v in col], index=col.index, dtype=float)
        bad = num.isna() & ~(blank & (c in optional))
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            # +2: header is line 1, data rows start at line 2
            raise SchemaError(f"{path}: row {i + 2}, column '{c}': cannot parse {raw[c].iloc[i]!r}",
                              path=str(path), row=i + 2, column=c)
        if c in positive:
            nonpos = ~(num > 0) & ~blank
            if nonpos.any():
                i = int(np.flatnonzero(nonpos.to_numpy())[0])
                raise SchemaError(f"{path}: row {i + 2}, column '{c}': must be positive, got {raw[c].iloc[i]!r}",
                                  path=str(path), row=i + 2, column=c)
        out[c] = num
    df = pd.DataFrame(out)
    ts = df["timestamp_ms"]
    if (ts != np.floor(ts)).any():
        i = int(np.flatnonzero((ts != np.floor(ts)).to_numpy())[0])
        raise SchemaError(f"{path}: row {i + 2}, column 'timestamp_ms': not an integer",
                          path=str(path), row=i + 2, column="timestamp_ms")
    df["timestamp_ms"] = ts.astype("int64")
    non_mono = int((np.diff(df["timestamp_ms"].to_numpy()) < 0).sum())
    df = df.sort_values("timestamp_ms", kind="stable").reset_index(drop=True)
    return df, {"rows": len(df), "rejected": 0, "non_monotone": non_mono}


def load_events(swap_path, lp_path=None, oracle_path=None) -> EventDataset:
    swaps, r1 = _read_csv(swap_path, SWAP_COLUMNS, optional=("depth",), positive=("rate", "depth"), name="swaps")
    lp, r2 = _read_csv(lp_path, LP_COLUMNS, positive=("tick_lower", "tick_upper"), name="lp")
    oracle, r3 = _read_csv(oracle_path, ORACLE_COLUMNS, positive=("rate",), name="oracle")
    if len(lp) and (lp["tick_lower"] >= lp["tick_upper"]).any():
        i = int(np.flatnonzero((lp["tick_lower"] >= lp["tick_upper"]).to_numpy())[0])
        raise SchemaError(f"{lp_path}: LP event {i} has tick_lower >= tick_upper", path=str(lp_path),
                          column="tick_lower")
    return EventDataset(swaps, lp, oracle, {"swaps": r1, "lp": r2, "oracle": r3})


def write_events(ds: EventDataset, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"swaps": directory / "swaps.csv", "lp": directory / "lp_events.csv",
             "oracle": directory / "oracle.csv"}
    ds.swaps[SWAP_COLUMNS].to_csv(paths["swaps"], index=False, float_format="%.17g")
    ds.lp[LP_COLUMNS].to_csv(paths["lp"], index=False, float_format="%.17g")
    ds.oracle[ORACLE_COLUMNS].to_csv(paths["oracle"], index=False, float_format="%.17g")
    return paths


class LiquidityHistory:
    """Cumulative per-range depth after each LP event."""

    def __init__(self, boundaries, depths, timestamps):
        self.boundaries = np.asarray(boundaries, dtype=float)
        self.depths = np.asarray(depths, dtype=float)  # (n_events + 1, n_ranges)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)

    def depths_at(self, timestamp_ms) -> np.ndarray:
        """Depth vector after all events with timestamp <= ``timestamp_ms``."""
        k = int(np.searchsorted(self.timestamps, timestamp_ms, side="right"))
        return self.depths[k]

    def profile_at(self, timestamp_ms) -> LiquidityProfile | None:
        d = self.depths_at(timestamp_ms)
        if not np.any(d > 0):
            return None
        return LiquidityProfile(tuple(self.boundaries), tuple(d))

    def depth_at_rate(self, timestamp_ms, Z) -> float:
        b = self.boundaries
        if not b[0] <= Z < b[-1]:
            return 0.0
        return float(self.depths_at(timestamp_ms)[bisect.bisect_right(b.tolist(), Z) - 1])


def reconstruct_liquidity(lp_events: pd.DataFrame, initial: LiquidityProfile | None = None,
                          atol: float = 1e-9) -> LiquidityHistory:
    lp = lp_events.sort_values("timestamp_ms", kind="stable")
    bounds = set(initial.boundaries) if initial is not None else set()
    bounds.update(lp["tick_lower"].tolist())
    bounds.update(lp["tick_upper"].tolist())
    b = np.array(sorted(bounds), dtype=float)
    if b.size < 2:
        return LiquidityHistory(b if b.size else np.array([1.0, 2.0]), np.zeros((1, max(b.size - 1, 1))), [])
    cur = np.zeros(b.size - 1)
    if initial is not None:
        ib = np.asarray(initial.boundaries)
        mids = 0.5 * (b[:-1] + b[1:])
        inside = (mids >= ib[0]) & (mids < ib[-1])
        idx = np.clip(np.searchsorted(ib, mids, side="right") - 1, 0, len(initial.depths) - 1)
        cur = np.where(inside, np.asarray(initial.depths)[idx], 0.0)
    rows = [cur.copy()]
    scale = max(1.0, float(np.abs(lp["liquidity_delta"]).max()) if len(lp) else 1.0)
    for ts, lo, hi, dk in lp[["timestamp_ms", "tick_lower", "tick_upper", "liquidity_delta"]].itertuples(index=False):
        i0 = int(np.searchsorted(b, lo))
        i1 = int(np.searchsorted(b, hi))
        cur[i0:i1] += dk
        small = np.abs(cur) <= atol * scale
        cur[small] = 0.0
        if np.any(cur < 0):
            raise LiquidityUnderflow(f"withdrawal exceeds supplied depth at timestamp {ts}", timestamp_ms=int(ts))
        rows.append(cur.copy())
    return LiquidityHistory(b, np.array(rows), lp["timestamp_ms"].to_numpy())


def synthetic_dataset(path: MarketPath, start_ms: int = 0) -> tuple[EventDataset, tuple[int, int]]:
    """Turn a simulated Model I path into swap and oracle events.

    Step i of the path becomes a swap moving the rate from Z_{i-1} to Z_i at
    depth kappa_i; the oracle ticks S_i at the same time. A zero-size record
    at t_0 carries the initial state. Returns the dataset and the execution
    window [t_1, t_n + dt) in which the investor trades at t_1..t_n.
    """
    if path.S is None:
        raise ValueError("synthetic backtest datasets need an oracle path (Model I)")
    ts = start_ms + np.rint(path.times * MS_PER_DAY).astype(np.int64)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("path step is below 1 ms")
    Z, k = path.Z, path.kappa
    dy = np.concatenate([[0.0], k[1:] * (1 / np.sqrt(Z[1:]) - 1 / np.sqrt(Z[:-1]))])
    dx = np.concatenate([[0.0], k[1:] * (np.sqrt(Z[:-1]) - np.sqrt(Z[1:]))])
    swaps = pd.DataFrame({"timestamp_ms": ts, "delta_y": dy, "delta_x": dx, "rate": Z, "depth": k})
    oracle = pd.DataFrame({"timestamp_ms": ts, "rate": path.S})
    window = (int(ts[1]), int(ts[-1] + (ts[-1] - ts[-2])))
    return EventDataset(swaps, _empty(LP_COLUMNS), oracle, {"synthetic": True}), window
