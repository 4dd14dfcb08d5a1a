"""Run every JSON config in scripts/configs and write artifacts under runs/.

    python scripts/run_all.py [--out runs] [--jobs 1] [name ...]
"""

import argparse
import pathlib
import sys

from geosharp.harness.cli import main as cli_main

HERE = pathlib.Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", help="config stems to run (default: all)")
    p.add_argument("--out", default="runs")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    configs = sorted((HERE / "configs").glob("*.json"))
    if args.names:
        configs = [c for c in configs if c.stem in args.names]
    status = 0
    for cfg in configs:
        out = pathlib.Path(args.out) / cfg.stem
        print(f"== {cfg.stem} -> {out}", flush=True)
        rc = cli_main(["run", "--config", str(cfg), "--out", str(out), "--jobs", str(args.jobs)])
        status = status or rc
    return status


if __name__ == "__main__":
    sys.exit(main())
