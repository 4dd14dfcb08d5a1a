"""Command line entry point: ``geosharp run`` and ``geosharp validate``."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import ConfigError, parse_config, validate
from .experiments import run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


def _u64(text):
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _parser():
    p = argparse.ArgumentParser(prog="geosharp", description="Quotient-geometry sharpness experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write its artifacts")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    run.add_argument("--seed", type=_u64, default=None)
    run.add_argument("--jobs", type=int, default=None)
    val = sub.add_parser("validate", help="check a config and print it with defaults filled")
    val.add_argument("--config", required=True)
    return p


def _load(path, **overrides):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from exc
    cfg = parse_config(raw)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return validate(dataclasses.replace(cfg, **overrides)) if overrides else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = _load(args.config)
        else:
            cfg = _load(args.config, seed=args.seed, jobs=args.jobs, output_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(cfg.to_json())
        return EXIT_OK

    out = cfg.output_dir or os.path.join("runs", f"{cfg.experiment}-seed{cfg.seed}")
    try:
        artifacts = run_experiment(cfg)
        artifacts.write(out)
    except Exception as exc:  # any failure inside the experiment maps to one exit code
        print(f"experiment failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"wrote {out}")
    results = artifacts.summary.get("results", {})
    if "tau" in results:
        print("tau " + " ".join(f"{k}={v:+.3f}" for k, v in results["tau"].items()))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
