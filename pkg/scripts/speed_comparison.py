"""Numerical (PDE) versus closed-form trading speed at the reference Model I parameters.

Solves the Model I PDE on the default 201x201x200 grid, evaluates both speeds at
t=0 on a 41x41 (Z, S) panel around 2000 for inventories -100, 0 and 100, and
writes the panel plus a short summary.

    python scripts/speed_comparison.py --output results/speed
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from cpmm_exec.closed_form import ClosedFormStrategy, ControlParams
from cpmm_exec.pde import check_bounds_model1, default_grid_model1, solve_model1, speed_numerical_model1


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output", default="results/speed")
    ap.add_argument("--n", type=int, default=201, help="space nodes per axis")
    ap.add_argument("--nt", type=int, default=200, help="time steps")
    ap.add_argument("--halfwidth", type=float, default=200.0)
    args = ap.parse_args(argv)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    p = ControlParams(phi=1e-5, alpha=5.0, eta=1.0, T=0.1, beta=1.0, gamma=0.02, sigma=0.03, kappa=1e7)
    t0 = time.perf_counter()
    fields = solve_model1(p, default_grid_model1(2000.0, 2000.0, args.n, args.nt))
    solve_s = time.perf_counter() - t0
    cf = ClosedFormStrategy(p, 1000.0, 4000.0)
    grid = np.linspace(2000 - args.halfwidth, 2000 + args.halfwidth, 41)
    Z, S = np.meshgrid(grid, grid, indexing="ij")
    frames, summary = [], {"solve_seconds": solve_s, "bounds_passed": check_bounds_model1(fields, p).passed,
                           "diagnostics": fields.diagnostics, "panels": {}}
    for y in (-100.0, 0.0, 100.0):
        num = speed_numerical_model1(fields, 0.0, y, Z, S)
        ref = cf.speed(0.0, y, Z, S)
        diff = np.abs(num - ref)
        frames.append(pd.DataFrame({"y_tilde": y, "Z": Z.ravel(), "S": S.ravel(),
                                    "nu_numerical": num.ravel(), "nu_closed_form": ref.ravel()}))
        summary["panels"][str(y)] = {
            "max_abs_speed": float(np.max(np.abs(num))),
            "max_diff_on_diagonal": float(np.max(np.diag(diff))),
            "max_diff": float(np.max(diff)),
            "spearman_gap_vs_diff": float(spearmanr(np.abs(S - Z).ravel(), diff.ravel())[0]),
        }
    pd.concat(frames).to_csv(out / "speed_panel.csv", index=False)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    print(json.dumps(summary["panels"], indent=2))
    print(f"solve {solve_s:.1f} s; outputs in {out}")


if __name__ == "__main__":
    main()
