"""Finite-difference solvers for the semilinear HJB systems.

Both models reduce (after the quadratic ansatz in inventory) to three
backward parabolic equations in time-to-go tau = T - t:

    d_tau th2 = L th2 - phi + q th2^2
    d_tau th1 = L th1 + src1 + q th2 th1
    d_tau th0 = L th0 + (q/4) th1^2

with q = kappa / (eta Z^{3/2}) and L the generator of the state process.
Model I:  L = beta (S - Z) d_Z + 1/2 gamma^2 Z^2 d_ZZ + 1/2 sigma^2 S^2 d_SS,
          src1 = beta (S - Z).
Model II: L = 1/2 gamma^2 Z^2 d_ZZ + 1/2 varsigma^2 kappa^2 d_kk, src1 = 0.

Each time level is fully implicit. The nonlinearity is linearized Picard
style (th2_k * th2_{k+1}) and every Picard sweep solves one tridiagonal
system per Z-line and one per second-axis line (Douglas splitting). At the
fixed point the split iteration reproduces the unsplit implicit step.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg.lapack import dgtsv

from .closed_form import ControlParams
from .dynamics import Model2Params, expected_terminal_rate

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class PicardError(RuntimeError):
    def __init__(self, msg, level=None, residual=None, history=None):
        super().__init__(msg)
        self.level, self.residual, self.history = level, residual, history


class InstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class PicardConfig:
    max_iterations: int = 50
    tol: float = 1e-8
    damping: float = 1.0
    scheme: str = "bdf2"  # or "euler"

    def __post_init__(self):
        if self.max_iterations < 1 or not self.tol > 0 or not 0 < self.damping <= 1:
            raise ValueError("need max_iterations >= 1, tol > 0, damping in (0, 1]")
        if self.scheme not in ("bdf2", "euler"):
            raise ValueError("scheme must be 'bdf2' or 'euler'")


@dataclass(frozen=True)
class GridSpec:
    Z: tuple
    X: tuple  # S for Model I, kappa for Model II
    n_t: int = 200
    time_stretch: float = 3.0  # 0 -> uniform steps; >0 grades steps toward t = T

    def __post_init__(self):
        z = tuple(float(v) for v in self.Z)
        x = tuple(float(v) for v in self.X)
        object.__setattr__(self, "Z", z)
        object.__setattr__(self, "X", x)
        for name, a in (("Z", z), ("X", x)):
            if len(a) < 3 or a[0] <= 0 or any(b <= c for c, b in zip(a, a[1:])):
                raise ValueError(f"axis {name} needs >= 3 positive strictly increasing nodes")
        if self.n_t < 1 or self.time_stretch < 0:
            raise ValueError("n_t >= 1 and time_stretch >= 0 required")

    @classmethod
    def log_spaced(cls, z_lo, z_hi, nz, x_lo, x_hi, nx, n_t=200, time_stretch=3.0):
        return cls(tuple(np.geomspace(z_lo, z_hi, nz)), tuple(np.geomspace(x_lo, x_hi, nx)),
                   n_t, time_stretch)

    def taus(self, T: float) -> np.ndarray:
        s = np.linspace(0.0, 1.0, self.n_t + 1)
        if self.time_stretch == 0:
            return T * s
        g = self.time_stretch
        tau = T * np.sinh(g * s) / math.sinh(g)
        tau[-1] = T
        return tau


def default_grid_model1(Z0=2000.0, S0=2000.0, n=201, n_t=200) -> GridSpec:
    return GridSpec.log_spaced(Z0 / 2, 2 * Z0, n, S0 / 2, 2 * S0, n, n_t)


def default_grid_model2(Z0=2000.0, kappa0=1e7, n=201, n_t=200) -> GridSpec:
    return GridSpec.log_spaced(Z0 / 2, 2 * Z0, n, kappa0 / 4, 4 * kappa0, n, n_t)


@dataclass
class SolvedFields:
    t: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    theta0: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    model: str
    params: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def x_name(self) -> str:
        return "S" if self.model == "I" else "kappa"

    def _interp(self, name):
        cache = self.__dict__.setdefault("_interp_cache", {})
        if name not in cache:
            cache[name] = RegularGridInterpolator((self.t, self.Z, self.X), getattr(self, name),
                                                  bounds_error=True)
        return cache[name]

    def at(self, name, t, Z, X):
        t, Z, X = np.broadcast_arrays(np.asarray(t, float), np.asarray(Z, float), np.asarray(X, float))
        pts = np.stack([t.ravel(), Z.ravel(), X.ravel()], axis=-1)
        try:
            return self._interp(name)(pts).reshape(t.shape)
        except ValueError as exc:
            raise ValueError(f"query outside the solved grid hull: {exc}") from None

    def to_bundle(self, directory, time_indices=None) -> list[Path]:
        """One CSV per field; first line is a JSON metadata comment."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        idx = np.arange(self.t.size) if time_indices is None else np.asarray(time_indices)
        T, Zg, Xg = np.meshgrid(self.t[idx], self.Z, self.X, indexing="ij")
        meta = {"version": BUNDLE_VERSION, "model": self.model, "x_name": self.x_name,
                "t": self.t[idx].tolist(), "Z": self.Z.tolist(), "X": self.X.tolist(),
                "params": self.params}
        out = []
        for name in ("theta0", "theta1", "theta2"):
            path = directory / f"{name}.csv"
            df = pd.DataFrame({"t": T.ravel(), "Z": Zg.ravel(), self.x_name: Xg.ravel(),
                               "value": getattr(self, name)[idx].ravel()})
            with open(path, "w") as fh:
                fh.write("# " + json.dumps({**meta, "field": name}) + "\n")
                df.to_csv(fh, index=False, float_format="%.17g")
            out.append(path)
        return out

    @classmethod
    def from_bundle(cls, directory) -> "SolvedFields":
        directory = Path(directory)
        vals, meta = {}, None
        for name in ("theta0", "theta1", "theta2"):
            path = directory / f"{name}.csv"
            with open(path) as fh:
                meta = json.loads(fh.readline()[2:])
                if meta.get("version") != BUNDLE_VERSION:
                    raise ValueError(f"unsupported bundle version in {path}")
                df = pd.read_csv(fh, float_precision="round_trip")
            shape = (len(meta["t"]), len(meta["Z"]), len(meta["X"]))
            vals[name] = df["value"].to_numpy(float).reshape(shape)
        return cls(np.array(meta["t"]), np.array(meta["Z"]), np.array(meta["X"]),
                   vals["theta0"], vals["theta1"], vals["theta2"], meta["model"], meta["params"])


# ---------------------------------------------------------------- stencils

def _spacings(x):
    d = np.diff(x)
    hm = np.concatenate([[d[0]], d])
    hp = np.concatenate([d, [d[-1]]])
    return hm, hp


def line_operator(x, diff, adv):
    """Tridiagonal coefficients (l, c, r) of diff * d_xx + adv * d_x along the last axis.

    Central differences on the nonuniform grid; advection falls back to
    upwinding wherever the central stencil would lose the M-matrix sign
    pattern. Boundaries: zero-derivative ghost node (u_{-1} = u_0), advection
    dropped.
    """
    x = np.asarray(x, dtype=float)
    hm, hp = _spacings(x)
    diff, adv = np.broadcast_arrays(np.asarray(diff, float), np.asarray(adv, float))
    l = 2 * diff / (hm * (hm + hp))
    r = 2 * diff / (hp * (hm + hp))
    central = (2 * diff >= adv * hp) & (2 * diff >= -adv * hm)
    al = np.where(central, -hp / (hm * (hm + hp)), np.where(adv < 0, -1 / hm, 0.0))
    ar = np.where(central, hm / (hp * (hm + hp)), np.where(adv > 0, 1 / hp, 0.0))
    ac = np.where(central, (hp - hm) / (hp * hm), -al - ar)
    l, r = l + adv * al, r + adv * ar
    c = -2 * diff / (hm * hp) + adv * ac
    l[..., 0] = 0.0
    r[..., 0] = diff[..., 0] / hp[0] ** 2
    c[..., 0] = -r[..., 0]
    r[..., -1] = 0.0
    l[..., -1] = diff[..., -1] / hm[-1] ** 2
    c[..., -1] = -l[..., -1]
    return l, c, r


def apply_operator(l, c, r, u):
    out = c * u
    out[..., 1:] += l[..., 1:] * u[..., :-1]
    out[..., :-1] += r[..., :-1] * u[..., 1:]
    return out


def solve_lines(l, c, r, rhs):
    """Solve independent tridiagonal systems along the last axis in one LAPACK call."""
    n = rhs.shape[-1]
    lo = np.array(l, dtype=float).reshape(-1, n)
    up = np.array(r, dtype=float).reshape(-1, n)
    lo[:, 0] = 0.0  # decouple consecutive lines
    up[:, -1] = 0.0
    *_, x, info = dgtsv(lo.ravel()[1:], np.array(c, float).ravel(), up.ravel()[:-1],
                        np.array(rhs, float).ravel())
    if info != 0:
        raise InstabilityError(f"singular tridiagonal system (info={info})")
    return x.reshape(rhs.shape)


# ---------------------------------------------------------------- core solver

class _Operators:
    """Split operator L = Lz + Lx on a (nZ, nX) grid."""

    def __init__(self, Z, X, dz, az, dx, ax):
        # Z-lines run along axis 0 -> transpose to put them last
        self.z = line_operator(Z, dz.T, az.T)
        self.x = line_operator(X, dx, ax)

    def Lx(self, u):
        return apply_operator(*self.x, u)

    def Lz(self, u):
        return apply_operator(*self.z, u.T).T


def _level(ops, R, a0, h, react, src, u0, cfg, label):
    """Solve a0 u - h (L u + react(u) u + src) = R by Picard / Douglas sweeps.

    ``react`` returns the reaction coefficient evaluated at the latest iterate.
    """
    u = u0.copy()
    hist = []
    lz, cz, rz = ops.z
    lx, cx, rx = ops.x
    scale = 1.0
    for _ in range(cfg.max_iterations):
        rq = react(u)
        Lxu = ops.Lx(u)
        v = solve_lines(-h * lz, a0 - h * cz - h * rq.T, -h * rz, (R + h * src + h * Lxu).T).T
        un = solve_lines(-h * lx, a0 - h * cx, -h * rx, a0 * v - h * Lxu)
        if cfg.damping < 1:
            un = (1 - cfg.damping) * u + cfg.damping * un
        if not np.all(np.isfinite(un)):
            raise InstabilityError(f"{label}: non-finite values; refine the time step")
        err = float(np.max(np.abs(un - u)))
        scale = max(1.0, float(np.max(np.abs(un))))
        hist.append(err)
        u = un
        if err <= cfg.tol * scale:
            return u, hist
    raise PicardError(f"{label}: Picard iteration did not converge in {cfg.max_iterations} "
                      f"iterations (final residual {hist[-1]:.3e})", residual=hist[-1], history=hist)


def _march(ops, q, taus, alpha, phi, src1, cfg, growth_cap):
    n = taus.size - 1
    shape = q.shape
    th2 = np.empty((n + 1,) + shape)
    th1 = np.empty_like(th2)
    th0 = np.empty_like(th2)
    th2[0], th1[0], th0[0] = -alpha, 0.0, 0.0
    hists = []
    for m in range(n):
        h = taus[m + 1] - taus[m]
        if cfg.scheme == "bdf2" and m > 0:
            w = h / (taus[m] - taus[m - 1])
            a0 = (1 + 2 * w) / (1 + w)
            c1, c2 = 1 + w, w * w / (1 + w)
            R2, R1, R0 = (c1 * f[m] - c2 * f[m - 1] for f in (th2, th1, th0))
        else:
            a0 = 1.0
            R2, R1, R0 = th2[m], th1[m], th0[m]
        lab = f"level {m + 1}/{n}"
        try:
            u2, h2 = _level(ops, R2, a0, h, lambda u: q * u, -phi, th2[m], cfg, "theta2 " + lab)
            if np.max(np.abs(u2)) > growth_cap(taus[m + 1]):
                raise InstabilityError(f"theta2 sup norm grew to {np.max(np.abs(u2)):.3e} at {lab}; "
                                       "refine the time step")
            u1, _ = _level(ops, R1, a0, h, lambda u: q * u2, src1, th1[m], cfg, "theta1 " + lab)
            u0, _ = _level(ops, R0, a0, h, lambda u: np.zeros_like(u), 0.25 * q * u1 * u1,
                           th0[m], cfg, "theta0 " + lab)
        except PicardError as exc:
            exc.level = m + 1
            raise
        th2[m + 1], th1[m + 1], th0[m + 1] = u2, u1, u0
        hists.append(h2)
    # store in ascending calendar time
    return th2[::-1].copy(), th1[::-1].copy(), th0[::-1].copy(), hists


def _diagnostics(hists):
    mono = [all(b <= a for a, b in zip(hh, hh[1:])) for hh in hists]
    return {
        "picard_histories": hists,
        "picard_iterations_max": max(len(hh) for hh in hists),
        "picard_monotone_fraction": float(np.mean(mono)),
    }


def solve_model1(params: ControlParams, grid: GridSpec, cfg: PicardConfig = PicardConfig()) -> SolvedFields:
    p = params
    Z, S = np.asarray(grid.Z), np.asarray(grid.X)
    ZZ, SS = np.meshgrid(Z, S, indexing="ij")
    q = p.kappa / (p.eta * ZZ**1.5)
    ops = _Operators(Z, S, 0.5 * p.gamma**2 * ZZ**2, p.beta * (SS - ZZ),
                     0.5 * p.sigma**2 * SS**2, np.zeros_like(SS))
    taus = grid.taus(p.T)
    cap = lambda tau: 10.0 * (p.alpha + p.phi * tau) + 1.0
    th2, th1, th0, hists = _march(ops, q, taus, p.alpha, p.phi, p.beta * (SS - ZZ), cfg, cap)
    diag = _diagnostics(hists)
    log.info("model I solve: max Picard iterations %d, monotone fraction %.3f",
             diag["picard_iterations_max"], diag["picard_monotone_fraction"])
    return SolvedFields(p.T - taus[::-1], Z, S, th0, th1, th2, "I",
                        {**asdict(p), "scheme": cfg.scheme, "n_t": grid.n_t,
                         "time_stretch": grid.time_stretch}, diag)


def solve_model2(dyn: Model2Params, control: ControlParams, grid: GridSpec,
                 cfg: PicardConfig = PicardConfig()) -> SolvedFields:
    p = control
    Z, K = np.asarray(grid.Z), np.asarray(grid.X)
    ZZ, KK = np.meshgrid(Z, K, indexing="ij")
    q = KK / (p.eta * ZZ**1.5)
    zero = np.zeros_like(ZZ)
    ops = _Operators(Z, K, 0.5 * dyn.gamma**2 * ZZ**2, zero, 0.5 * dyn.varsigma**2 * KK**2, zero)
    taus = grid.taus(p.T)
    cap = lambda tau: 10.0 * (p.alpha + p.phi * tau) + 1.0
    th2, th1, th0, hists = _march(ops, q, taus, p.alpha, p.phi, zero, cfg, cap)
    diag = _diagnostics(hists)
    return SolvedFields(p.T - taus[::-1], Z, K, th0, th1, th2, "II",
                        {"gamma": dyn.gamma, "varsigma": dyn.varsigma, "phi": p.phi,
                         "alpha": p.alpha, "eta": p.eta, "T": p.T, "scheme": cfg.scheme,
                         "n_t": grid.n_t, "time_stretch": grid.time_stretch}, diag)


# ---------------------------------------------------------------- speeds

def speed_numerical_model1(fields: SolvedFields, t, y_tilde, Z, S):
    if fields.model != "I":
        raise ValueError("fields are not a Model I solve")
    p = fields.params
    th2 = fields.at("theta2", t, Z, S)
    th1 = fields.at("theta1", t, Z, S)
    return -(p["kappa"] / (2 * p["eta"])) * np.asarray(Z, float) ** -1.5 * (2 * th2 * y_tilde + th1)


def speed_model2(fields: SolvedFields, t, y_tilde, Z, kappa):
    if fields.model != "II":
        raise ValueError("fields are not a Model II solve")
    th2 = fields.at("theta2", t, Z, kappa)
    th1 = fields.at("theta1", t, Z, kappa)
    return -(np.asarray(kappa, float) / (2 * fields.params["eta"])) * np.asarray(Z, float) ** -1.5 \
        * (2 * th2 * y_tilde + th1)


# ---------------------------------------------------------------- bounds

def merton_C(params: ControlParams, t):
    p = params
    if not p.phi > 0:
        raise ValueError("Merton coefficients need phi > 0")
    a = p.gamma**2 - 2 * p.beta
    b = p.beta**2 / (4 * p.phi)
    tau = p.T - np.asarray(t, dtype=float)
    if a == 0:
        return b * tau
    return b * np.expm1(a * tau) / a


def merton_bound_coeffs(params: ControlParams, t) -> tuple[float, float, float]:
    """(A, B, C) of the Merton upper envelope A S^2 + B S Z / 2 + C Z^2 at time t."""
    p = params
    if not p.phi > 0:
        raise ValueError("Merton coefficients need phi > 0")
    if t > p.T:
        raise ValueError("need t <= T")
    eps = dict(epsabs=0.0, epsrel=1e-13, limit=200)

    def Bm(s):
        f = lambda u: math.exp(-p.beta * (u - s)) * (4 * p.beta * float(merton_C(p, u)) - p.beta**2 / p.phi)
        return quad(f, s, p.T, **eps)[0] if s < p.T else 0.0

    b = p.beta**2 / (4 * p.phi)
    g = lambda u: math.exp(p.sigma**2 * (u - t)) * (0.5 * p.beta * Bm(u) + b)
    A = quad(g, t, p.T, **eps)[0] if t < p.T else 0.0
    return A, Bm(t), float(merton_C(p, t))


def merton_rk4(params: ControlParams, t: float, n: int = 2000) -> tuple[float, float, float]:
    """Backward RK4 on the Merton ODE system, as an independent oracle."""
    p = params
    b = p.beta**2 / (4 * p.phi)
    a = p.gamma**2 - 2 * p.beta

    def f(u):  # derivatives in calendar time
        A, B, C = u
        return np.array([-(p.sigma**2 * A + b + 0.5 * p.beta * B),
                         -(-p.beta * B - p.beta**2 / p.phi + 4 * p.beta * C),
                         -(a * C + b)])

    u = np.zeros(3)
    h = (p.T - t) / n
    for _ in range(n):
        k1 = f(u)
        k2 = f(u - 0.5 * h * k1)
        k3 = f(u - 0.5 * h * k2)
        k4 = f(u - h * k3)
        u = u - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return tuple(float(v) for v in u)


@dataclass
class BoundReport:
    checks: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(c["violations"] == 0 for c in self.checks.values())

    def summary(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "checks": self.checks}


def _margin(name, lower, value, upper, tol, checks):
    lo = value - lower
    hi = upper - value
    checks[name] = {
        "min_margin_lower": float(np.min(lo)),
        "min_margin_upper": float(np.min(hi)),
        "violations": int(np.sum((lo < -tol) | (hi < -tol))),
    }


def check_bounds_model1(fields: SolvedFields, params: ControlParams, tol: float = 1e-6) -> BoundReport:
    """Evaluate the a-priori envelopes for theta2, theta1, theta0 at every node."""
    p = params
    checks: dict = {}
    c_pen = p.alpha + p.phi * (p.T - fields.t)
    coeffs = np.array([merton_bound_coeffs(p, float(t)) for t in _coarse_times(fields.t)])
    Am = np.interp(fields.t, _coarse_times(fields.t), coeffs[:, 0])
    Bm = np.interp(fields.t, _coarse_times(fields.t), coeffs[:, 1])
    Cm = np.interp(fields.t, _coarse_times(fields.t), coeffs[:, 2])
    _, ZZ, SS = np.meshgrid(fields.t, fields.Z, fields.X, indexing="ij")
    M = Am[:, None, None] * SS**2 + 0.5 * Bm[:, None, None] * SS * ZZ + Cm[:, None, None] * ZZ**2
    c = c_pen[:, None, None]
    d = expected_terminal_rate(ZZ, SS, p.beta, fields.t[:, None, None], p.T) - ZZ
    _margin("theta2", -c, fields.theta2, M, tol, checks)
    _margin("theta1", -c - M, fields.theta1, M + c, tol, checks)
    _margin("theta0", np.zeros_like(M), fields.theta0, M + d, tol, checks)
    return BoundReport(checks, tol)


def _coarse_times(t):
    # Merton coefficients are smooth; evaluate on <= 101 nodes and interpolate
    if t.size <= 101:
        return t
    return np.unique(np.concatenate([np.linspace(t[0], t[-1], 101), t[-1:]]))


def check_bounds_model2(fields: SolvedFields, tol: float = 1e-12) -> BoundReport:
    p = fields.params
    checks: dict = {}
    lower = -(p["alpha"] + p["phi"] * (p["T"] - fields.t))[:, None, None]
    _margin("theta2", lower * np.ones_like(fields.theta2), fields.theta2,
            np.zeros_like(fields.theta2), tol, checks)
    z = np.zeros_like(fields.theta1)
    _margin("theta1", z, fields.theta1, z, tol, checks)
    _margin("theta0", z, fields.theta0, z, tol, checks)
    return BoundReport(checks, tol)


def frozen_riccati_field(fields: SolvedFields) -> np.ndarray:
    """Pointwise Riccati A(t, zeta) with zeta = Z^{3/2}/kappa on the solved grid."""
    from .closed_form import riccati_A

    p = fields.params
    T = p["T"]
    tt, ZZ, XX = np.meshgrid(fields.t, fields.Z, fields.X, indexing="ij")
    kappa = XX if fields.model == "II" else p["kappa"]
    return riccati_A(T - tt, ZZ**1.5 / kappa, p["phi"], p["alpha"], p["eta"])
