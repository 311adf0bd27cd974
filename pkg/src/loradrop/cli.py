"""Command-line interface.

Subcommands:
    verify   — run the numerical certification suite; nonzero exit on failure
    train    — train one configuration and persist metrics + checkpoint
    sweep    — grid over a rate / rank / KL-weight axis and seeds
    compare  — train named method bundles over seeds; medians and p-values
    report   — summarize a run directory and emit curve data as CSV
    init-config — write a default config JSON to edit
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analytic, config as config_mod, harness


def _parse_values(text: str, cast):
    return [cast(v) for v in text.split(",") if v != ""]


def cmd_verify(args) -> int:
    report = analytic.run_verification(n_instances=args.instances, seed=args.seed)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["passed"] else 1


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = harness._with_seed(cfg, args.seed)
    res = harness.train(cfg, out_dir=args.out)
    summary = {
        "run_dir": str(res.run_dir) if res.run_dir else None,
        "best_eval_metric": res.best_eval,
        "best_step": res.best_step,
        "final_eval_metric": res.final.eval_metric,
        "final_train_metric": res.final.train_metric,
        "final_train_loss": res.final.train_loss,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = config_mod.load(args.config)
    axis = {"rate": "dropout_rate", "rank": "lora_rank", "kl_weight": "kl_weight"}[args.axis]
    cast = int if axis == "lora_rank" else float
    values = (_parse_values(args.values, cast) if args.values
              else harness.DEFAULT_SWEEP_VALUES[axis])
    spec = harness.SweepSpec(
        axis=axis,
        values=values,
        seeds=_parse_values(args.seeds, int),
        base_config=cfg,
    )
    result = harness.sweep(spec, out_dir=args.out)
    doc = {
        "axis": result.axis,
        "median_best_eval": {str(k): v for k, v in result.median_best().items()},
        "cells": [{"value": c.value, "seed": c.seed, "best_eval": c.best_eval,
                   "final_eval": c.final_eval} for c in result.cells],
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    cfg = config_mod.load(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = harness.compare(methods, cfg, _parse_values(args.seeds, int), out_dir=args.out)
    print(report.to_json())
    return 0


def cmd_report(args) -> int:
    csv_path = args.csv or str(Path(args.run) / "curves.csv")
    summary = harness.report(args.run, csv_path=csv_path)
    summary["curves_csv"] = csv_path
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_init_config(args) -> int:
    cfg = config_mod.default_config(task_kind=args.task)
    cfg.save(args.path)
    print(f"wrote {args.path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loradrop", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="numerical certification of the dropout equivalences")
    v.add_argument("--instances", type=int, default=1000)
    v.add_argument("--seed", type=int, default=analytic.DEFAULT_VERIFY_SEED)
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default="runs")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="grid sweep over one axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", choices=("rate", "rank", "kl_weight"), required=True)
    s.add_argument("--values", default=None,
                   help="comma-separated values (default: the standard grid for the axis)")
    s.add_argument("--seeds", required=True, help="comma-separated seeds")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("compare", help="compare named dropout methods over seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--methods", default=",".join(harness.METHOD_NAMES))
    c.add_argument("--seeds", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_compare)

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--csv", default=None)
    r.set_defaults(fn=cmd_report)

    i = sub.add_parser("init-config", help="write a default config file")
    i.add_argument("path")
    i.add_argument("--task", default="majority_class",
                   choices=("majority_class", "noisy_parity", "scalar_sum"))
    i.set_defaults(fn=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
