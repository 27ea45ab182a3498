"""Model I strategies with frozen (constant) impact parameter zeta.

For a fixed zeta the value function is quadratic in (y~, Z, S) and the
coefficients solve a backward ODE system:

    A' = phi - A^2 / (eta zeta)                      A(T) = -alpha
    B' = beta + beta B - A B / (eta zeta)            B(T) = 0,  C = -B
    E' = -(gamma^2 - 2 beta) E - B^2 / (4 eta zeta)
    F' = -beta G - sigma^2 F - C^2 / (4 eta zeta)
    G' = -2 beta E + beta G - B C / (2 eta zeta)     E(T) = F(T) = G(T) = 0

and the optimal speed is nu = -A y~/(eta zeta) + B (S - Z) / (2 eta zeta).
A has a closed form; everything else is integrated backward from T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

RTOL = 1e-10
ATOL = 1e-13
DEFAULT_NT = 10_000


@dataclass(frozen=True)
class ControlParams:
    phi: float
    alpha: float
    eta: float
    T: float
    beta: float = 0.0
    gamma: float = 0.0
    sigma: float = 0.0
    kappa: float = 1e7

    def __post_init__(self):
        if self.phi < 0 or self.alpha < 0:
            raise ValueError("phi and alpha must be non-negative")
        if self.eta <= 0 or self.T <= 0 or self.kappa <= 0:
            raise ValueError("eta, T, kappa must be positive")
        if self.beta < 0 or self.gamma < 0 or self.sigma < 0:
            raise ValueError("beta, gamma, sigma must be non-negative")

    def zeta(self, Z):
        return np.asarray(Z, dtype=float) ** 1.5 / self.kappa


def riccati_A(tau, zeta, phi: float, alpha: float, eta: float):
    """Closed-form A at time-to-go ``tau`` for impact parameter ``zeta``.

    A = -(alpha + k th) / (1 + alpha th / k),  k = sqrt(phi eta zeta),
    th = tanh(sqrt(phi / (eta zeta)) tau).  Stable for every alpha >= 0 and
    reduces to -1 / (1/alpha + tau/(eta zeta)) when phi = 0.
    """
    tau = np.asarray(tau, dtype=float)
    ez = eta * np.asarray(zeta, dtype=float)
    k = np.sqrt(phi * ez)
    with np.errstate(divide="ignore", invalid="ignore"):
        th = np.tanh(np.sqrt(phi / ez) * tau)
        r = np.where(k > 0, th / np.where(k > 0, k, 1.0), tau / ez)  # th/k, limit tau/ez
    return -(alpha + k * k * r) / (1.0 + alpha * r)


def riccati_A_phi0(tau, zeta, alpha: float, eta: float):
    """Separable solution for phi = 0."""
    tau = np.asarray(tau, dtype=float)
    if alpha == 0:
        return np.zeros(np.broadcast(tau, np.asarray(zeta)).shape)
    return -1.0 / (1.0 / alpha + tau / (eta * np.asarray(zeta, dtype=float)))


def default_time_grid(T: float, n: int = DEFAULT_NT) -> np.ndarray:
    return np.linspace(0.0, T, n + 1)


def _check_grid(t, T):
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing with >= 2 nodes")
    if abs(t[0]) > 1e-12 * T or abs(t[-1] - T) > 1e-12 * T:
        raise ValueError(f"time grid must cover [0, T] = [0, {T}]")
    return t


def solve_B_batch(params: ControlParams, zetas, t) -> np.ndarray:
    """B for many zetas at once; returns array (len(zetas), len(t))."""
    t = _check_grid(t, params.T)
    zetas = np.atleast_1d(np.asarray(zetas, dtype=float))
    if np.any(zetas <= 0):
        raise ValueError("zeta must be positive")
    p = params
    ez = p.eta * zetas
    if p.beta == 0:
        return np.zeros((zetas.size, t.size))

    def rhs(tau, B):  # dB/dtau = -B'(t)
        A = riccati_A(tau, zetas, p.phi, p.alpha, p.eta)
        return -(p.beta + p.beta * B - A * B / ez)

    tau = (p.T - t)[::-1]
    tau[0] = 0.0
    sol = solve_ivp(rhs, (0.0, p.T), np.zeros(zetas.size), method="RK45",
                    t_eval=tau, rtol=RTOL, atol=ATOL)
    if not sol.success:
        raise RuntimeError(f"B integration failed: {sol.message}")
    return sol.y[:, ::-1]


@dataclass
class CoefficientTable:
    zeta: float
    t: np.ndarray
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    params: ControlParams
    # D, H, I, J vanish identically for this system
    zero_coeffs: tuple = field(default=("D", "H", "I", "J"))

    @property
    def C(self) -> np.ndarray:
        return -self.B

    def A_at(self, t):
        return riccati_A(self.params.T - np.asarray(t, dtype=float), self.zeta,
                         self.params.phi, self.params.alpha, self.params.eta)

    def B_at(self, t):
        return np.interp(t, self.t, self.B)

    def value(self, i: int, y, Z, S):
        """Quadratic value function at grid node i."""
        B, C = self.B[i], -self.B[i]
        return (self.A[i] * y * y + B * Z * y + C * y * S + self.E[i] * Z * Z
                + self.F[i] * S * S + self.G[i] * Z * S)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.t, "A": self.A, "B": self.B, "E": self.E,
                             "F": self.F, "G": self.G})

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def solve_constant_zeta(params: ControlParams, zeta: float, time_grid=None,
                        with_value: bool = True) -> CoefficientTable:
    p = params
    t = _check_grid(default_time_grid(p.T) if time_grid is None else time_grid, p.T)
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    ez = p.eta * zeta
    A = riccati_A(p.T - t, zeta, p.phi, p.alpha, p.eta)
    A[-1] = -p.alpha
    if not with_value:
        B = solve_B_batch(p, [zeta], t)[0]
        z = np.zeros_like(t)
        return CoefficientTable(zeta, t, A, B, z, z.copy(), z.copy(), p)

    a = p.gamma**2 - 2 * p.beta

    def rhs(tau, u):
        B, E, F, G = u
        Ax = riccati_A(tau, zeta, p.phi, p.alpha, p.eta)
        C = -B
        dB = p.beta + p.beta * B - Ax * B / ez
        dE = -a * E - B * B / (4 * ez)
        dF = -p.beta * G - p.sigma**2 * F - C * C / (4 * ez)
        dG = -2 * p.beta * E + p.beta * G - B * C / (2 * ez)
        return [-dB, -dE, -dF, -dG]

    tau = (p.T - t)[::-1]
    tau[0] = 0.0
    sol = solve_ivp(rhs, (0.0, p.T), np.zeros(4), method="RK45", t_eval=tau,
                    rtol=RTOL, atol=ATOL)
    if not sol.success:
        raise RuntimeError(f"coefficient integration failed: {sol.message}")
    B, E, F, G = sol.y[:, ::-1]
    return CoefficientTable(zeta, t, A, B, E, F, G, p)


def ode_residuals(table: CoefficientTable, skip_last: int = 0) -> dict:
    """Sup-norm residuals of the ODE system under central differences.

    Uses the three-point (nonuniform) central stencil at interior nodes.
    ``skip_last`` drops that many interior nodes next to T.
    """
    p, t, ez = table.params, table.t, table.params.eta * table.zeta
    hm = t[1:-1] - t[:-2]
    hp = t[2:] - t[1:-1]

    def d(f):
        return (-hp / (hm * (hm + hp)) * f[:-2] + (hp - hm) / (hp * hm) * f[1:-1]
                + hm / (hp * (hm + hp)) * f[2:])

    A, B, E, F, G = (v[1:-1] for v in (table.A, table.B, table.E, table.F, table.G))
    C = -B
    res = {
        "A": d(table.A) - (p.phi - A * A / ez),
        "B": d(table.B) - (p.beta + p.beta * B - A * B / ez),
        "E": d(table.E) - (-(p.gamma**2 - 2 * p.beta) * E - B * B / (4 * ez)),
        "F": d(table.F) - (-p.beta * G - p.sigma**2 * F - C * C / (4 * ez)),
        "G": d(table.G) - (-2 * p.beta * E + p.beta * G - B * C / (2 * ez)),
    }
    n = len(hm) - skip_last
    return {k: float(np.max(np.abs(v[:n]))) for k, v in res.items()}


def speed_constant_zeta(table: CoefficientTable, t, y_tilde, Z, S):
    """Feedback speed for a fixed zeta. A is evaluated in closed form at t."""
    ez = table.params.eta * table.zeta
    A = table.A_at(t)
    B = table.B_at(t)
    return -A / ez * y_tilde + B / (2 * ez) * (np.asarray(S) - np.asarray(Z))


@dataclass(frozen=True)
class RatePartition:
    z_lo: float
    z_hi: float
    N: int
    kappa: float

    def __post_init__(self):
        if not (0 < self.z_lo < self.z_hi) or self.N < 1 or self.kappa <= 0:
            raise ValueError("need 0 < z_lo < z_hi, N >= 1, kappa > 0")

    @property
    def nodes(self) -> np.ndarray:
        j = np.arange(self.N + 1)
        return self.z_lo + j / self.N * (self.z_hi - self.z_lo)

    @property
    def zetas(self) -> np.ndarray:
        return self.nodes**1.5 / self.kappa

    def segment(self, Z):
        """Segment index: 0 below Z_1, j on [Z_j, Z_{j+1}), N at or above Z_N."""
        j = np.floor((np.asarray(Z, dtype=float) - self.z_lo) * self.N / (self.z_hi - self.z_lo))
        j = np.clip(j, 0, self.N).astype(int)
        # exact node test guards against rounding in the floor above
        nodes = self.nodes
        j = np.where((j < self.N) & (np.asarray(Z) >= nodes[np.minimum(j + 1, self.N)]), j + 1, j)
        j = np.where((j > 0) & (np.asarray(Z) < nodes[j]), j - 1, j)
        return j


def build_partition(z_lo: float, z_hi: float, N: int, kappa: float) -> RatePartition:
    return RatePartition(float(z_lo), float(z_hi), int(N), float(kappa))


class PiecewiseStrategy:
    """Piecewise-constant-zeta strategy over a rate partition."""

    def __init__(self, params: ControlParams, partition: RatePartition, time_grid=None):
        if partition.kappa != params.kappa:
            raise ValueError("partition depth must match params.kappa")
        self.params = params
        self.partition = partition
        self.t = default_time_grid(params.T) if time_grid is None else np.asarray(time_grid, float)
        self.zetas = partition.zetas
        self.B = solve_B_batch(params, self.zetas, self.t)

    def speed_segment(self, j, t, y_tilde, Z, S):
        p = self.params
        j = np.asarray(j)
        zeta = self.zetas[j]
        ez = p.eta * zeta
        A = riccati_A(p.T - np.asarray(t, dtype=float), zeta, p.phi, p.alpha, p.eta)
        B = _interp_rows(self.t, self.B, j, t)
        return -A / ez * y_tilde + B / (2 * ez) * (np.asarray(S) - np.asarray(Z))

    def speed(self, t, y_tilde, Z, S):
        return self.speed_segment(self.partition.segment(Z), t, y_tilde, Z, S)

    def max_jump(self, t, y_tilde, S) -> float:
        """Largest discontinuity at the interior nodes Z_1..Z_N."""
        nodes = self.partition.nodes
        j = np.arange(1, self.partition.N + 1)
        left = self.speed_segment(j - 1, t, y_tilde, nodes[j], S)
        right = self.speed_segment(j, t, y_tilde, nodes[j], S)
        return float(np.max(np.abs(left - right)))


def speed_piecewise(strategy: PiecewiseStrategy, t, y_tilde, Z, S):
    return strategy.speed(t, y_tilde, Z, S)


def _interp_rows(tgrid, table, rows, t):
    """Linear interpolation in time of table[rows] at times t (broadcast)."""
    t = np.asarray(t, dtype=float)
    rows, t = np.broadcast_arrays(rows, t)
    k = np.clip(np.searchsorted(tgrid, t, side="right") - 1, 0, tgrid.size - 2)
    w = (t - tgrid[k]) / (tgrid[k + 1] - tgrid[k])
    return (1 - w) * table[rows, k] + w * table[rows, k + 1]


class ClosedFormStrategy:
    """Frozen-rate closed-form strategy: zeta = Z^{3/2}/kappa evaluated at the current Z.

    ``mode="lattice"`` precomputes B on ``n_z`` log-spaced rates and
    interpolates bilinearly (log Z, t). ``mode="exact"`` solves B for each
    distinct zeta on demand (cached).
    """

    def __init__(self, params: ControlParams, z_lo: float | None = None, z_hi: float | None = None,
                 n_z: int = 512, n_t: int = DEFAULT_NT, mode: str = "lattice"):
        if mode not in ("lattice", "exact"):
            raise ValueError("mode must be 'lattice' or 'exact'")
        self.params, self.mode = params, mode
        self.t = default_time_grid(params.T, n_t)
        if mode == "lattice":
            if z_lo is None or z_hi is None or not 0 < z_lo < z_hi:
                raise ValueError("lattice mode needs a bracket 0 < z_lo < z_hi")
            self.logz = np.linspace(math.log(z_lo), math.log(z_hi), n_z)
            self.B = solve_B_batch(params, np.exp(self.logz) ** 1.5 / params.kappa, self.t)
        self._tables: dict = {}

    def table(self, zeta: float) -> CoefficientTable:
        tab = self._tables.get(zeta)
        if tab is None:
            tab = solve_constant_zeta(self.params, zeta, self.t, with_value=False)
            self._tables[zeta] = tab
        return tab

    def coefficients(self, t, Z):
        p = self.params
        Z = np.asarray(Z, dtype=float)
        zeta = Z**1.5 / p.kappa
        A = riccati_A(p.T - np.asarray(t, dtype=float), zeta, p.phi, p.alpha, p.eta)
        if self.mode == "exact":
            t_b, Z_b = np.broadcast_arrays(np.asarray(t, float), Z)
            B = np.empty(t_b.shape)
            for idx in np.ndindex(t_b.shape):
                B[idx] = self.table(float(Z_b[idx] ** 1.5 / p.kappa)).B_at(t_b[idx])
            return A, B
        x = np.clip(np.log(Z), self.logz[0], self.logz[-1])
        h = self.logz[1] - self.logz[0]
        i = np.clip(((x - self.logz[0]) / h).astype(int), 0, self.logz.size - 2)
        w = (x - self.logz[i]) / h
        B = (1 - w) * _interp_rows(self.t, self.B, i, t) + w * _interp_rows(self.t, self.B, i + 1, t)
        return A, B

    def speed(self, t, y_tilde, Z, S):
        p = self.params
        Z = np.asarray(Z, dtype=float)
        A, B = self.coefficients(t, Z)
        f = p.kappa / p.eta * Z**-1.5
        return -f * A * y_tilde + 0.5 * f * B * (np.asarray(S) - Z)


@lru_cache(maxsize=8)
def _exact_strategy(params: ControlParams) -> ClosedFormStrategy:
    return ClosedFormStrategy(params, mode="exact")


def speed_closed_form(t, y_tilde, Z, S, params: ControlParams):
    """Closed-form approximation strategy, exact per-rate coefficients."""
    return _exact_strategy(params).speed(t, y_tilde, Z, S)


def twap_limit_inventory(t, y0: float, T: float, eta: float, zeta: float, alpha: float):
    """Inventory under the phi = beta = 0 strategy at constant zeta."""
    return y0 * (1.0 - np.asarray(t) / (T + eta * zeta / alpha))


def with_kappa(params: ControlParams, kappa: float) -> ControlParams:
    return replace(params, kappa=float(kappa))
