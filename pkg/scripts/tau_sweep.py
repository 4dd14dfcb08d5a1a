"""Kendall τ of the diagonal-network experiment across radii and perturbation maps.

Each cell reruns the full experiment (about 1.5 min on one core), so the
default 3×2 grid takes roughly ten minutes.

    python scripts/tau_sweep.py [--seed 0] [--rho 0.05 0.1 0.5] [--jobs 1]
"""

import argparse
import json

from geosharp.harness.config import parse_config
from geosharp.harness.experiments import run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, nargs="+", default=[0.05, 0.1, 0.5])
    p.add_argument("--geodesic", nargs="+", default=["second_order", "exact"])
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    print("rho      geodesic       adaptive   inv      mix      converged")
    for rho in args.rho:
        for geo in args.geodesic:
            cfg = parse_config(json.dumps({"experiment": "diag-corr", "seed": args.seed, "rho": rho,
                                           "geodesic": geo, "jobs": args.jobs}))
            res = run_experiment(cfg).summary["results"]
            t = res["tau"]
            print(f"{rho:<8g} {geo:<14} {t['adaptive']:+.3f}     {t['inv']:+.3f}   {t['mix']:+.3f}   "
                  f"{res['n_converged']}", flush=True)


if __name__ == "__main__":
    main()
