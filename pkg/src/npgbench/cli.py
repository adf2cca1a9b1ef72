"""Command-line entry point.

Subcommands: train (one experiment config), grid (hyperparameter search),
metrics (tables for a result directory), report (baseline-vs-tuned
comparison).  Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    build_report,
    compute_metrics,
    grid_search,
    parse_experiment_config,
    parse_grid_spec,
    run_experiment,
    write_grid_outputs,
    write_report,
)


def _cmd_train(args):
    config = parse_experiment_config(args.config)
    store, trained = run_experiment(config)
    total = len(config.cells())
    print(
        f"{config.label}: {trained} cell(s) trained, {total - trained} reused, "
        f"results in {store.root}"
    )


def _cmd_grid(args):
    spec = parse_grid_spec(args.gridspec)
    selection, results = grid_search(spec)
    write_grid_outputs(spec, selection, results)
    print(f"{spec.label}: evaluated {len(results)} cell(s) on {spec.tuning_env}")
    for backend in sorted(selection):
        cell, score = selection[backend]
        print(
            f"  {backend}: performance {score:.4f} at damping={cell.damping}, "
            f"critic_lr={cell.critic_lr}, step_mode={cell.step_mode}, "
            f"max_lr={cell.max_lr}, batch_size={cell.batch_size}, "
            f"critic_backend={cell.critic_backend}"
        )


def _cmd_metrics(args):
    thresholds = None
    if args.thresholds:
        payload = json.loads(Path(args.thresholds).read_text())
        thresholds = payload.get("values", payload)
    records, _ = compute_metrics(args.result_dir, thresholds=thresholds)
    print(f"wrote metrics for {len(records)} cell(s) to {args.result_dir}")


def _cmd_report(args):
    base_records, base_thresholds = compute_metrics(args.baseline)
    tuned_records, _ = compute_metrics(args.tuned, thresholds=base_thresholds)
    rows = build_report(base_records, tuned_records)
    out = args.out or str(Path(args.tuned) / "report.csv")
    text = write_report(rows, out)
    print(text, end="")
    print(f"report written to {out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="npgbench",
        description="Natural policy gradient benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run all (env, seed) cells of an experiment config")
    p.add_argument("config", help="flat key = value experiment config file")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("grid", help="grid search on the tuning environment")
    p.add_argument("gridspec", help="flat key = value grid specification file")
    p.set_defaults(fn=_cmd_grid)

    p = sub.add_parser("metrics", help="write metric tables for a result directory")
    p.add_argument("result_dir")
    p.add_argument("--thresholds", help="thresholds.json from a baseline run")
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("report", help="baseline-vs-tuned comparison table")
    p.add_argument("--baseline", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--out", help="output CSV path (default: <tuned>/report.csv)")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
