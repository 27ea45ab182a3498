"""Command-line front end: simulate | estimate | solve | backtest | compare."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import backtest as bt
from .closed_form import ControlParams, solve_constant_zeta, ClosedFormStrategy
from .dynamics import Model1Params, Model2Params, PositivityError, simulate_model1, simulate_model2
from .estimation import EstimationError
from .events import LiquidityUnderflow, SchemaError, load_events, synthetic_dataset, write_events
from .pde import (GridSpec, InstabilityError, PicardConfig, PicardError, check_bounds_model1,
                  check_bounds_model2, frozen_riccati_field, solve_model1, solve_model2,
                  speed_numerical_model1)

log = logging.getLogger("cpmm_exec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4


class UsageError(ValueError):
    pass


DEFAULTS = {
    "simulate": {"model": 1, "sigma": 0.03, "beta": 1.0, "gamma": 0.02, "S0": 2000.0, "Z0": 2000.0,
                 "T": 0.1, "kappa": 1e7, "varsigma": 0.05, "kappa0": 1e7, "dt": None, "n_paths": 1,
                 "events": False},
    "estimate": {"swaps": None, "oracle": None, "lp": None, "start_ms": None, "end_ms": None},
    "solve": {"model": 1, "method": "both", "phi": 1e-5, "alpha": 5.0, "eta": 1.0, "T": 0.1,
              "beta": 1.0, "gamma": 0.02, "sigma": 0.03, "varsigma": 0.05, "kappa": 1e7,
              "kappa0": 1e7, "Z0": 2000.0, "S0": 2000.0, "nz": 201, "nx": 201, "nt": 200,
              "time_stretch": 3.0, "scheme": "bdf2", "picard_max_iter": 50, "picard_tol": 1e-8,
              "picard_damping": 1.0, "panel_halfwidth": 200.0, "panel_n": 41},
    "backtest": {"swaps": None, "oracle": None, "lp": None, "strategy": "all", "in_sample_hours": 24.0,
                 "horizon_hours": 2.0, "shift_hours": 2.0, "phi": 0.005, "alpha": 10.0,
                 "phi_speculative": 0.001, "participation": 0.5, "gas": 5.0, "amm_bps": 1.0,
                 "write_reports": True},
    "compare": {"n_windows": 200, "sigma": 0.045, "beta": 657.9, "gamma": 0.034, "S0": 2689.2,
                "Z0": 2690.77, "T": 0.083, "kappa": 22_561_783.0, "eta_seconds": 13.0, "y0": 14_877.0,
                "phi": 0.005, "alpha": 10.0, "phi_speculative": 0.001, "gas": 5.0, "amm_bps": 1.0},
}

STRATEGIES = ("liquidation", "speculative", "twap", "single_order")


# keys that change where or how fast results are produced, not what they are
_NON_SEMANTIC = {"output", "jobs", "verbose", "config"}


def fingerprint(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in _NON_SEMANTIC}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()


def _write_json(path: Path, obj, fp: str) -> Path:
    path.write_text(json.dumps({"config_fingerprint": fp, **obj}, indent=2, default=_default))
    return path


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _manifest(out: Path, cfg: dict, fp: str, files: list) -> None:
    (out / "config.json").write_text(json.dumps({"config_fingerprint": fp, "config": cfg}, indent=2,
                                                default=_default))
    (out / "manifest.json").write_text(json.dumps(
        {"config_fingerprint": fp, "files": sorted(str(Path(f).relative_to(out)) for f in files)}, indent=2))


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: dict, out: Path, fp: str) -> list:
    files = []
    dt = cfg["dt"] if cfg["dt"] is not None else cfg["T"] / 5000
    for k in range(int(cfg["n_paths"])):
        seed = int(cfg["seed"]) + k
        if int(cfg["model"]) == 1:
            p = Model1Params(cfg["sigma"], cfg["beta"], cfg["gamma"], cfg["S0"], cfg["Z0"], cfg["T"], cfg["kappa"])
            path = simulate_model1(p, dt, seed)
        elif int(cfg["model"]) == 2:
            p = Model2Params(cfg["gamma"], cfg["varsigma"], cfg["Z0"], cfg["kappa0"], cfg["T"])
            path = simulate_model2(p, dt, seed)
        else:
            raise UsageError("--model must be 1 or 2")
        files.append(path.to_csv(out / f"path_seed{seed}.csv"))
        if cfg["events"] and int(cfg["model"]) == 1:
            ds, window = synthetic_dataset(path)
            sub = out / f"events_seed{seed}"
            files.extend(write_events(ds, sub).values())
            files.append(_write_json(sub / "window.json", {"start_ms": window[0], "end_ms": window[1]}, fp))
        print(f"seed {seed}: wrote {out / f'path_seed{seed}.csv'}")
    return files


def cmd_estimate(cfg: dict, out: Path, fp: str) -> list:
    if not cfg["swaps"] or not cfg["oracle"]:
        raise UsageError("estimate needs --swaps and --oracle")
    ds = load_events(cfg["swaps"], cfg["lp"], cfg["oracle"])
    view = bt.MarketView(ds)
    t0, t1 = int(view.ts[0]), int(view.ts[-1]) + 1
    start = t0 if cfg["start_ms"] is None else int(cfg["start_ms"])
    end = t1 if cfg["end_ms"] is None else int(cfg["end_ms"])
    if start < t0 or end > t1 or end <= start:
        raise bt.DataError(f"window [{start}, {end}) outside data span [{t0}, {t1})")
    est, _ = bt.estimate_window(ds, view, start, end)
    rec = est.to_record()
    if not est.diagnostics["beta_defined"]:
        rec["flags"] = ["beta_undefined: S and Z never diverge"]
    path = _write_json(out / "estimation.json", rec, fp)
    print(json.dumps({k: rec[k] for k in ("sigma_hat", "beta_hat", "gamma_hat", "eta", "kappa0")}))
    return [path]


def _picard(cfg):
    return PicardConfig(int(cfg["picard_max_iter"]), float(cfg["picard_tol"]), float(cfg["picard_damping"]),
                        cfg["scheme"])


def cmd_solve(cfg: dict, out: Path, fp: str) -> list:
    files = []
    model = int(cfg["model"])
    cp = ControlParams(cfg["phi"], cfg["alpha"], cfg["eta"], cfg["T"], cfg["beta"], cfg["gamma"],
                       cfg["sigma"], cfg["kappa"])
    if cfg["method"] not in ("closed-form", "pde", "both"):
        raise UsageError("--method must be closed-form, pde or both")
    if model == 1 and cfg["method"] in ("closed-form", "both"):
        tab = solve_constant_zeta(cp, cfg["Z0"] ** 1.5 / cfg["kappa"])
        files.append(tab.to_csv(out / "coefficients.csv"))
    if cfg["method"] == "closed-form":
        return files
    Z0 = cfg["Z0"]
    if model == 1:
        grid = GridSpec.log_spaced(Z0 / 2, 2 * Z0, cfg["nz"], cfg["S0"] / 2, 2 * cfg["S0"], cfg["nx"],
                                   cfg["nt"], cfg["time_stretch"])
        fields = solve_model1(cp, grid, _picard(cfg))
        deg = cp.beta == 0 and cp.gamma == 0 and cp.sigma == 0
        report = check_bounds_model1(fields, cp) if cp.phi > 0 else None
    elif model == 2:
        k0 = cfg["kappa0"]
        grid = GridSpec.log_spaced(Z0 / 2, 2 * Z0, cfg["nz"], k0 / 4, 4 * k0, cfg["nx"], cfg["nt"],
                                   cfg["time_stretch"])
        dyn = Model2Params(cfg["gamma"], cfg["varsigma"], Z0, k0, cfg["T"])
        fields = solve_model2(dyn, cp, grid, _picard(cfg))
        deg = dyn.gamma == 0 and dyn.varsigma == 0
        report = check_bounds_model2(fields)
    else:
        raise UsageError("--model must be 1 or 2")
    files.extend(fields.to_bundle(out / "fields", time_indices=[0, fields.t.size - 1]))
    diag = {k: v for k, v in fields.diagnostics.items() if k != "picard_histories"}
    summary = {"model": fields.model, "diagnostics": diag,
               "bounds": report.summary() if report is not None else None}
    if deg:
        err = float(np.max(np.abs(fields.theta2 - frozen_riccati_field(fields))))
        summary["riccati_match"] = {"sup_error": err, "tol": 1e-4, "passed": err <= 1e-4}
    files.append(_write_json(out / "solve_report.json", summary, fp))
    if model == 1:
        hw, n = cfg["panel_halfwidth"], int(cfg["panel_n"])
        zs = np.linspace(Z0 - hw, Z0 + hw, n)
        ss = np.linspace(cfg["S0"] - hw, cfg["S0"] + hw, n)
        Zg, Sg = np.meshgrid(zs, ss, indexing="ij")
        strat = ClosedFormStrategy(cp, Z0 / 2, 2 * Z0)
        rows = []
        for y in (-100.0, 0.0, 100.0):
            vn = speed_numerical_model1(fields, 0.0, y, Zg, Sg)
            vc = strat.speed(0.0, y, Zg, Sg)
            rows.append(pd.DataFrame({"y_tilde": y, "Z": Zg.ravel(), "S": Sg.ravel(),
                                      "nu_numerical": vn.ravel(), "nu_closed_form": vc.ravel()}))
        path = out / "speed_comparison.csv"
        pd.concat(rows).to_csv(path, index=False, float_format="%.10g")
        files.append(path)
    print(json.dumps(summary, default=_default)[:2000])
    return files


def _campaign_cfg(cfg, jobs):
    strategies = STRATEGIES if cfg["strategy"] == "all" else (cfg["strategy"],)
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s}")
    return bt.CampaignConfig(cfg["in_sample_hours"], cfg["horizon_hours"], cfg["shift_hours"], cfg["phi"],
                             cfg["alpha"], cfg["phi_speculative"], cfg["participation"],
                             bt.FeeModel(cfg["gas"], cfg["amm_bps"]), tuple(strategies), max(1, jobs))


def cmd_backtest(cfg: dict, out: Path, fp: str) -> list:
    if not cfg["swaps"] or not cfg["oracle"]:
        raise UsageError("backtest needs --swaps and --oracle")
    ds = load_events(cfg["swaps"], cfg["lp"], cfg["oracle"])
    ccfg = _campaign_cfg(cfg, int(cfg["jobs"]))
    res = bt.rolling_campaign(ds, ccfg)
    files = []
    if res.rows.empty:
        raise bt.DataError(f"no usable windows ({len(res.skipped)} skipped)")
    rows_path = out / "campaign_runs.csv"
    res.rows.assign(config_fingerprint=fp).to_csv(rows_path, index=False, float_format="%.10g")
    sum_path = out / "campaign_summary.csv"
    res.summary.assign(config_fingerprint=fp).to_csv(sum_path, index=False, float_format="%.10g")
    files += [rows_path, sum_path]
    if cfg["write_reports"]:
        view = bt.MarketView(ds)
        rep_dir = out / "reports"
        rep_dir.mkdir(exist_ok=True)
        done = set(int(w) for w in res.rows["window_start_ms"].unique())
        for triple in bt.campaign_windows(ds.span_ms[0], ds.span_ms[1] + 1, ccfg):
            if triple[1] not in done:
                continue
            est, reps = bt.window_reports(ds, view, triple, ccfg)
            for rep in reps:
                files.append(_write_json(rep_dir / f"window_{triple[1]}_{rep.strategy}.json",
                                         {**rep.to_dict(), "estimation": est.to_record()}, fp))
    files.append(_write_json(out / "skipped.json", {"skipped": res.skipped}, fp))
    print(res.summary.to_string(index=False))
    return files


def cmd_compare(cfg: dict, out: Path, fp: str) -> list:
    from .experiments import synthetic_comparison

    res = synthetic_comparison(
        n_windows=int(cfg["n_windows"]), seed=int(cfg["seed"]), sigma=cfg["sigma"], beta=cfg["beta"],
        gamma=cfg["gamma"], S0=cfg["S0"], Z0=cfg["Z0"], T=cfg["T"], kappa=cfg["kappa"],
        eta=cfg["eta_seconds"] / 86400.0, y0=cfg["y0"], phi=cfg["phi"], alpha=cfg["alpha"],
        phi_speculative=cfg["phi_speculative"], fee_model=bt.FeeModel(cfg["gas"], cfg["amm_bps"]),
        jobs=int(cfg["jobs"]))
    p1 = out / "comparison_runs.csv"
    res["rows"].assign(config_fingerprint=fp).to_csv(p1, index=False, float_format="%.10g")
    p2 = out / "comparison_summary.csv"
    res["summary"].assign(config_fingerprint=fp).to_csv(p2, index=False, float_format="%.10g")
    p3 = _write_json(out / "comparison_stats.json", res["stats"], fp)
    print(res["summary"].to_string(index=False))
    print(json.dumps(res["stats"], indent=1))
    return [p1, p2, p3]


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "solve": cmd_solve,
            "backtest": cmd_backtest, "compare": cmd_compare}


# ---------------------------------------------------------------- parsing

def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="base random seed (default 0)")
    p.add_argument("--jobs", type=int, default=d, help="worker processes for campaigns (default 1)")
    p.add_argument("--output", type=str, default=d, help="output directory (default ./out)")
    p.add_argument("--config", type=str, default=d, help="JSON config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpmm-exec", description=__doc__)
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)
    parent = argparse.ArgumentParser(add_help=False)
    _global_flags(parent, suppress=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[parent], help=help_, argument_default=argparse.SUPPRESS)

    s = add("simulate", "simulate Model I or II paths")
    s.add_argument("--model", type=int, choices=(1, 2))
    for f in ("sigma", "beta", "gamma", "S0", "Z0", "T", "kappa", "varsigma", "kappa0", "dt"):
        s.add_argument(f"--{f}", type=float)
    s.add_argument("--n-paths", dest="n_paths", type=int)
    s.add_argument("--events", action="store_true", help="also write swaps/oracle event CSVs (Model I)")

    e = add("estimate", "estimate dynamics and execution parameters from event files")
    for f in ("swaps", "oracle", "lp"):
        e.add_argument(f"--{f}", type=str)
    e.add_argument("--start-ms", dest="start_ms", type=int)
    e.add_argument("--end-ms", dest="end_ms", type=int)

    v = add("solve", "solve coefficient tables and/or PDE fields")
    v.add_argument("--model", type=int, choices=(1, 2))
    v.add_argument("--method", choices=("closed-form", "pde", "both"))
    for f in ("phi", "alpha", "eta", "T", "beta", "gamma", "sigma", "varsigma", "kappa", "kappa0", "Z0", "S0",
              "picard_tol", "picard_damping", "time_stretch", "panel_halfwidth"):
        v.add_argument(f"--{f.replace('_', '-')}", dest=f, type=float)
    for f in ("nz", "nx", "nt", "picard_max_iter", "panel_n"):
        v.add_argument(f"--{f.replace('_', '-')}", dest=f, type=int)
    v.add_argument("--scheme", choices=("bdf2", "euler"))

    b = add("backtest", "rolling-window backtest on event files")
    for f in ("swaps", "oracle", "lp"):
        b.add_argument(f"--{f}", type=str)
    b.add_argument("--strategy", choices=("all",) + STRATEGIES)
    for f in ("in_sample_hours", "horizon_hours", "shift_hours", "phi", "alpha", "phi_speculative",
              "participation", "gas", "amm_bps"):
        b.add_argument(f"--{f.replace('_', '-')}", dest=f, type=float)
    b.add_argument("--no-reports", dest="write_reports", action="store_false")

    c = add("compare", "synthetic strategy comparison (Model I generator)")
    c.add_argument("--n-windows", dest="n_windows", type=int)
    for f in ("sigma", "beta", "gamma", "S0", "Z0", "T", "kappa", "eta_seconds", "y0", "phi", "alpha",
              "phi_speculative", "gas", "amm_bps"):
        c.add_argument(f"--{f.replace('_', '-')}", dest=f, type=float)
    return ap


def resolve_config(args: argparse.Namespace) -> dict:
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    cfg.update({"seed": 0, "jobs": 1, "output": "out"})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        file_cfg = file_cfg.get(cmd, file_cfg)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config key(s) for {cmd}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        fp = fingerprint({"command": args.command, **cfg})
        files = COMMANDS[args.command](cfg, out, fp)
        _manifest(out, {"command": args.command, **cfg}, fp, files)
        print(f"config fingerprint {fp[:16]}; seed {cfg['seed']}; outputs in {out}")
        return EXIT_OK
    except (UsageError, TypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PicardError, InstabilityError, PositivityError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (SchemaError, bt.DataError, EstimationError, LiquidityUnderflow, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # invalid parameter values
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
