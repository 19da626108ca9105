"""Command line entry point: ``fedlrt run|check|summarize``."""

from __future__ import annotations

import argparse
import logging
import sys

from fedlrt.algorithms import ALGORITHMS
from fedlrt.harness import (
    EXPERIMENTS,
    ConfigError,
    check_run,
    compare_summary,
    load_config,
    run_experiment,
)
from fedlrt.losses import OracleError
from fedlrt.lowrank import ContractViolation

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THEOREM = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlrt", description="Federated low-rank training experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write a metrics CSV")
    run.add_argument("--config", help="YAML file with ExperimentConfig fields")
    run.add_argument("--experiment", choices=EXPERIMENTS)
    run.add_argument("--algorithm", choices=ALGORITHMS)
    run.add_argument("--n", type=int)
    run.add_argument("--r-target", type=int)
    run.add_argument("--samples", type=int)
    run.add_argument("--clients", type=int)
    run.add_argument("--local-iters", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--tau", type=float)
    run.add_argument("--rank-init", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", dest="seeds", help="seed list: '3', '0,1,2' or '0..19'")
    run.add_argument("--out")
    run.add_argument("--init-scale", type=float)
    run.add_argument("--r-min", type=int)
    run.add_argument("--r-max", type=int)
    run.add_argument("--jobs", type=int, help="worker processes for independent seeds")

    check = sub.add_parser("check", help="check drift and descent bounds on a finished run")
    check.add_argument("metrics")
    check.add_argument("--meta", help="sidecar JSON (default: <metrics>.meta.json)")
    check.add_argument("--quiet", action="store_true", help="print only the verdict lines")

    summ = sub.add_parser("summarize", help="tabulate one or more metrics files")
    summ.add_argument("metrics", nargs="+")
    summ.add_argument("--out", required=True)
    summ.add_argument("--threshold", type=float, default=1e-4)
    return p


def _cmd_run(args) -> int:
    overrides = {k: getattr(args, k) for k in (
        "experiment", "algorithm", "n", "r_target", "samples", "clients", "local_iters", "lr", "tau",
        "rank_init", "rounds", "seeds", "out", "init_scale", "r_min", "r_max", "jobs")}
    cfg = load_config(args.config, **overrides)
    result = run_experiment(cfg)
    for run in result.runs:
        last = run.rows[-1] if run.rows else None
        if run.status != "ok":
            print(f"seed {run.seed}: FAILED at round {run.failed_round}")
        elif last is None:
            print(f"seed {run.seed}: no rounds")
        else:
            print(f"seed {run.seed}: rank {last['rank']} loss {last['global_loss']:.3e} "
                  f"dist {last['dist_to_oracle']:.3e}")
    print(f"wrote {result.metrics_path}")
    return EXIT_NUMERIC if result.failed else EXIT_OK


def _cmd_check(args) -> int:
    report = check_run(args.metrics, args.meta)
    text = report.render()
    if args.quiet:
        text = "\n".join(l for l in text.splitlines() if " round " not in l)
    print(text)
    return EXIT_THEOREM if report.verdict == "fail" else EXIT_OK


def _cmd_summarize(args) -> int:
    rows = compare_summary(args.metrics, args.out, args.threshold)
    for row in rows:
        print(f"{row['algorithm']:>18} C={row['clients']:<3} final {row['median_final_loss']:.3e} "
              f"reach {row['median_rounds_to_threshold']} floats {row['cumulative_floats']:.0f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "check": _cmd_check, "summarize": _cmd_summarize}[args.command]
    try:
        return handler(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OracleError, ContractViolation, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
