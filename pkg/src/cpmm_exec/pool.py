"""Constant-product pool mechanics.

Sign convention: ``delta_y > 0`` means the agent sells Y into the pool and
receives X. ``delta_y < 0`` is a purchase of Y. All swap math is fee-free;
fees are applied by the backtest accounting layer.
"""
from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

DRAIN_FRACTION = 1e-9  # reject swaps leaving y' < DRAIN_FRACTION * y
DEPTH_RTOL = 1e-9


class PoolError(ValueError):
    pass


class DrainError(PoolError):
    """Swap would empty (or nearly empty) the Y side of the pool."""


class RateOutOfRange(PoolError):
    pass


class LiquidityExhausted(PoolError):
    pass


class ZeroDepthRange(PoolError):
    pass


class ConsistencyError(PoolError):
    pass


@dataclass(frozen=True)
class PoolState:
    x: float
    y: float
    kappa: float

    def __post_init__(self):
        if not (self.x > 0 and self.y > 0 and self.kappa > 0):
            raise PoolError(f"reserves and depth must be positive: {self}")
        k2 = self.x * self.y
        if abs(k2 - self.kappa**2) > DEPTH_RTOL * self.kappa**2:
            raise ConsistencyError(f"kappa^2={self.kappa**2!r} but x*y={k2!r}")

    @classmethod
    def from_depth(cls, kappa: float, y: float) -> "PoolState":
        return cls(kappa * kappa / y, float(y), float(kappa))

    @classmethod
    def from_reserves(cls, x: float, y: float) -> "PoolState":
        return cls(float(x), float(y), math.sqrt(x * y))

    @classmethod
    def from_rate(cls, Z: float, kappa: float) -> "PoolState":
        return cls.from_depth(kappa, kappa / math.sqrt(Z))

    @property
    def rate(self) -> float:
        return self.x / self.y


@dataclass(frozen=True)
class SwapFill:
    delta_y: float
    delta_x: float
    exec_rate: float
    rate_after: float

    @property
    def empty(self) -> bool:
        return self.delta_y == 0.0


def instantaneous_rate(pool: PoolState) -> float:
    return pool.x / pool.y


def _check_drain(y: float, delta_y: float) -> None:
    if y + delta_y <= DRAIN_FRACTION * y:
        raise DrainError(f"swap of {delta_y} would drain pool with y={y}")


def execution_rate_exact(pool: PoolState, delta_y: float) -> float:
    """Average rate received on a swap of ``delta_y``: kappa^2 / (y (y + dy))."""
    _check_drain(pool.y, delta_y)
    return pool.kappa**2 / (pool.y * (pool.y + delta_y))


def unitary_execution_cost_exact(pool: PoolState, delta_y: float) -> float:
    _check_drain(pool.y, delta_y)
    # closed form avoids cancellation in |Z - Z~|
    return pool.kappa**2 * abs(delta_y) / (pool.y**2 * (pool.y + delta_y))


def execution_cost_approx(Z: float, kappa: float, delta_y: float) -> float:
    """Convexity approximation Z^{3/2} |dy| / kappa."""
    return Z**1.5 * abs(delta_y) / kappa


def execution_rate_with_speed(Z: float, kappa: float, eta: float, nu: float) -> float:
    """Speed-scaled execution rate Z - (eta/kappa) Z^{3/2} nu."""
    out = Z - eta / kappa * Z**1.5 * nu
    if out <= 0:
        warnings.warn(
            f"non-positive execution rate {out:.6g}: speed {nu:.6g} too large for depth {kappa:.6g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def apply_swap(pool: PoolState, delta_y: float) -> tuple[PoolState, SwapFill]:
    if delta_y == 0:
        return pool, SwapFill(0.0, 0.0, pool.rate, pool.rate)
    _check_drain(pool.y, delta_y)
    y1 = pool.y + delta_y
    x1 = pool.kappa**2 / y1
    new = PoolState(x1, y1, pool.kappa)
    rate = pool.kappa**2 / (pool.y * y1)
    # dy * exec_rate equals x - x1 algebraically and avoids cancellation for tiny orders
    fill = SwapFill(delta_y, delta_y * rate, rate, x1 / y1)
    return new, fill


def apply_liquidity_change(pool: PoolState, rho: float) -> PoolState:
    if rho <= -1:
        raise PoolError(f"rho={rho} would remove all liquidity")
    f = 1.0 + rho
    return PoolState(pool.x * f, pool.y * f, pool.kappa * f)


@dataclass(frozen=True)
class LiquidityProfile:
    """Piecewise-constant depth over tick ranges [Z_i, Z_{i+1})."""

    boundaries: tuple
    depths: tuple

    def __post_init__(self):
        b = tuple(float(v) for v in self.boundaries)
        d = tuple(float(v) for v in self.depths)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "depths", d)
        if len(b) != len(d) + 1 or len(d) < 1:
            raise PoolError("need len(boundaries) == len(depths) + 1 >= 2")
        if any(b[i + 1] <= b[i] for i in range(len(d))) or b[0] <= 0:
            raise PoolError("boundaries must be positive and strictly increasing")
        if any(k < 0 for k in d) or not any(k > 0 for k in d):
            raise PoolError("depths must be >= 0 with at least one positive")

    @classmethod
    def uniform(cls, boundaries: Sequence[float], kappa: float) -> "LiquidityProfile":
        return cls(tuple(boundaries), (kappa,) * (len(boundaries) - 1))

    def range_index(self, Z: float) -> int:
        if not (self.boundaries[0] <= Z < self.boundaries[-1]):
            raise RateOutOfRange(f"rate {Z} outside [{self.boundaries[0]}, {self.boundaries[-1]})")
        return bisect.bisect_right(self.boundaries, Z) - 1

    def depth_at(self, Z: float) -> float:
        return self.depths[self.range_index(Z)]


def level_function_cl(profile: LiquidityProfile, Z: float, y: float) -> float:
    if y <= 0:
        raise PoolError("y must be positive")
    k = profile.depth_at(Z)
    return k * k / y


def swap_across_ticks(profile: LiquidityProfile, Z0: float, delta_y: float) -> tuple[float, float]:
    """Walk an order through tick ranges; returns (rate_after, delta_x).

    Inside range i the virtual reserve is y = kappa_i / sqrt(Z), so moving the
    rate from Z to Z' consumes kappa_i (1/sqrt(Z') - 1/sqrt(Z)) of Y and pays
    kappa_i (sqrt(Z) - sqrt(Z')) of X.
    """
    i = profile.range_index(Z0)
    b, d = profile.boundaries, profile.depths
    Z, rem, dx = float(Z0), float(delta_y), 0.0
    if rem == 0:
        return Z, 0.0
    if rem > 0:
        # selling Y: rate falls; at Z == b[i] we are already on the lower edge
        if Z == b[i]:
            i -= 1
        while True:
            if i < 0:
                raise LiquidityExhausted(f"order {delta_y} exhausts liquidity below {b[0]}")
            k = d[i]
            if k == 0:
                raise ZeroDepthRange(f"zero depth in range [{b[i]}, {b[i + 1]})")
            cap = k * (1 / math.sqrt(b[i]) - 1 / math.sqrt(Z))
            if rem <= cap:
                Zn = (1 / math.sqrt(Z) + rem / k) ** -2
                if rem == cap:
                    Zn = b[i]
                return Zn, dx + k * (math.sqrt(Z) - math.sqrt(Zn))
            dx += k * (math.sqrt(Z) - math.sqrt(b[i]))
            rem -= cap
            Z = b[i]
            i -= 1
    rem = -rem
    while True:
        if i >= len(d):
            raise LiquidityExhausted(f"order {delta_y} exhausts liquidity above {b[-1]}")
        k = d[i]
        if k == 0:
            raise ZeroDepthRange(f"zero depth in range [{b[i]}, {b[i + 1]})")
        cap = k * (1 / math.sqrt(Z) - 1 / math.sqrt(b[i + 1]))
        if rem < cap:
            Zn = (1 / math.sqrt(Z) - rem / k) ** -2
            return Zn, dx + k * (math.sqrt(Z) - math.sqrt(Zn))
        dx += k * (math.sqrt(Z) - math.sqrt(b[i + 1]))
        rem -= cap
        Z = b[i + 1]
        i += 1
