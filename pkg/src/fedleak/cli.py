"""Command-line entry point.

    fedleak <command> [--config cfg.json] [--seed N] [--out-dir DIR]
                      [--workers N | --serial] [--threshold T]

Commands: estimate, convergence, validate-attack, factors, prealarm.
The JSON config mirrors ExperimentConfig (nested "data", "estimator" and
"attack" sections); command-line flags override the file.  Exit code 0 on
success; on failure a single machine-readable JSON error line goes to
stderr and the exit code is nonzero (2 for configuration problems).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError, FedleakError
from .harness import (ExperimentConfig, config_hash, run_convergence, run_estimate,
                      run_factors, run_prealarm, run_validate_attack)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedleak",
        description="Gradient-leakage risk experiments for federated SGD clients.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "estimate": "one MI estimation run (task-model gradients or Gaussian oracle)",
        "convergence": "hierarchical vs flat statistic network training curves",
        "validate-attack": "MI vs gradient-inversion error over a grid",
        "factors": "MI over training epochs or class-imbalance ratios",
        "prealarm": "estimate the risk for one round and decide publish/withhold",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out-dir", help="directory for CSV outputs")
        p.add_argument("--workers", type=int, help="parallel grid workers")
        p.add_argument("--serial", action="store_true", help="force workers=1")
        if name == "prealarm":
            p.add_argument("--threshold", type=float, help="withhold threshold in nats")
    return parser


def _load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    raw["experiment"] = args.command
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out_dir is not None:
        raw["out_dir"] = args.out_dir
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.serial:
        raw["workers"] = 1
    if getattr(args, "threshold", None) is not None:
        raw["threshold"] = args.threshold
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        chash = config_hash(cfg)
        if cfg.experiment == "estimate":
            trace = run_estimate(cfg)
            mi = trace.final_estimate if trace.converged else trace.last_window_mean
            summary = {"status": "ok", "config_hash": chash, "mi_nats": mi,
                       "converged": trace.converged, "iterations": trace.iterations}
        elif cfg.experiment == "convergence":
            cells = run_convergence(cfg)
            summary = {"status": "ok", "config_hash": chash,
                       "cells": [{"variant": c.variant, "batch_size": c.batch_size,
                                  "mi_nats": c.mi_nats, "converged": c.converged,
                                  "failed": c.failed} for c in cells]}
        elif cfg.experiment == "validate-attack":
            records = run_validate_attack(cfg)
            summary = {"status": "ok", "config_hash": chash,
                       "points": [_record_dict(r) for r in records]}
        elif cfg.experiment == "factors":
            records = run_factors(cfg)
            summary = {"status": "ok", "config_hash": chash,
                       "points": [_record_dict(r) for r in records]}
        else:
            result = run_prealarm(cfg)
            summary = {"status": "ok", "config_hash": chash, "decision": result.decision,
                       "mi_nats": result.mi_nats, "converged": result.converged,
                       "reason": result.reason}
    except ConfigError as exc:
        print(json.dumps({"status": "error", "type": "ConfigError", "message": str(exc)}),
              file=sys.stderr)
        return 2
    except FedleakError as exc:
        print(json.dumps({"status": "error", "type": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, default=_jsonable))
    return 0


def _record_dict(r) -> dict:
    return {"axis_value": r.axis_value, "mi_nats": r.mi_nats,
            "cov_baseline": r.cov_baseline, "epsilon": r.epsilon,
            "converged": r.converged}


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value)}")


if __name__ == "__main__":
    sys.exit(main())
