"""Command-line entry point: run sweeps, aggregate results, print oracle
tables, and sanity-check gradients."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import harness
from .models import grad_check_architectures


def _cmd_run(args) -> int:
    csv_path = harness.run_sweep(args.config, workers=args.workers,
                                 output_dir=args.output_dir)
    print(csv_path)
    return 0


def _cmd_summarize(args) -> int:
    group_by = [c.strip() for c in args.group_by.split(",") if c.strip()]
    summary = harness.summarize(args.csvs, group_by, step=args.step,
                                out_path=args.output)
    if args.output is None:
        print(summary.to_string(index=False))
    else:
        print(args.output)
    return 0


def _cmd_oracle_table(args) -> int:
    raw = yaml.safe_load(Path(args.config).read_text())
    task_cell = raw["task"] if isinstance(raw, dict) and "task" in raw else raw
    if args.as_result_rows:
        frame = harness.oracle_result_rows(task_cell, episodes=args.episodes)
        if args.output is not None:
            harness.write_csv(frame, args.output)
    else:
        frame = harness.oracle_table(task_cell, episodes=args.episodes,
                                     out_path=args.output)
    if args.output is None:
        print(frame.to_string(index=False))
    else:
        print(args.output)
    return 0


def _cmd_grad_check(args) -> int:
    results = grad_check_architectures(instances=args.instances, seed=args.seed)
    worst = 0.0
    for kind, err in results.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{kind:<16} max_rel_err={err:.3e}  {status}")
        worst = max(worst, err)
    return 0 if worst < args.tolerance else 1


def _cmd_list_experiments(args) -> int:
    root = Path(args.dir)
    configs = sorted(root.glob("*.yaml")) + sorted(root.glob("*.yml"))
    if not configs:
        print(f"no experiment configs under {root}")
        return 1
    for path in configs:
        try:
            cfg = harness.ExperimentConfig.load(path)
            n_runs = len(harness.enumerate_runs(cfg))
            print(f"{path.name:<40} {cfg.name:<28} {n_runs} runs")
        except Exception as exc:  # surface broken configs, keep listing
            print(f"{path.name:<40} INVALID: {exc}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="icllab",
                                     description="in-context learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment config")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel runs (default: number of processors)")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("summarize", help="aggregate result CSVs with 95%% CIs")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--group-by", required=True,
                   help="comma-separated ResultRow columns")
    p.add_argument("--step", type=int, default=None)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=_cmd_summarize)

    p = sub.add_parser("oracle-table", help="reference values for a task grid")
    p.add_argument("config", help="experiment config (its task section is used)")
    p.add_argument("--episodes", type=int, default=100_000)
    p.add_argument("--as-result-rows", action="store_true",
                   help="emit the model-score CSV schema with arch=oracle:<name>")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=_cmd_oracle_table)

    p = sub.add_parser("grad-check", help="finite-difference check per architecture")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("list-experiments", help="show committed experiment configs")
    p.add_argument("dir", nargs="?", default="configs")
    p.set_defaults(fn=_cmd_list_experiments)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
