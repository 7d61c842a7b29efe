"""Command-line entry points: ``hcl run``, ``hcl report``, ``hcl plot``.

Exit codes: 0 on success, 2 on configuration errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigurationError
from .results_io import (
    aggregate,
    config_hash,
    find_run_dirs,
    format_results_table,
    load_run_record,
    parse_config,
    plot_accuracy_over_tasks,
    write_results,
)

# parse_config lives in results_io; re-exported there for config round-trips.


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hcl",
        description="Continual learning across heterogeneous architectures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one (config, seed) experiment")
    run.add_argument("--config", required=True, help="experiment config file")
    run.add_argument("--seed", type=int, required=True)
    run.add_argument("--data-dir", default=None, help="dataset root (or HCL_DATA_DIR)")
    run.add_argument("--out", default="runs", help="output root directory")
    run.add_argument("--dump-synth", default=None, help="dump synthesized batches here")
    run.add_argument("--resume", action="store_true", help="continue an interrupted run")

    report = sub.add_parser("report", help="aggregate seeds into a results table")
    report.add_argument("--out", required=True, help="directory containing run dirs")

    plot = sub.add_parser("plot", help="plot accuracy over the task sequence")
    plot.add_argument("--out", required=True, help="directory containing run dirs")
    return parser


def _cmd_run(args) -> int:
    from .trainer import continual_run

    cfg = parse_config(args.config)
    if args.data_dir:
        cfg.stream.data_dir = args.data_dir
    stem = os.path.splitext(os.path.basename(args.config))[0]
    run_dir = os.path.join(args.out, f"{stem}-{config_hash(cfg)}-seed{args.seed}")
    result = continual_run(
        cfg, args.seed, out_dir=run_dir, resume=args.resume, dump_synth=args.dump_synth
    )
    record = result.record
    print(f"run directory: {run_dir}")
    for mode in record.matrices:
        a_t, f_t = record.a_t[mode], record.f_t[mode]
        f_text = f"{f_t:.2f}" if f_t is not None else "n/a"
        print(f"  {mode}: A_T = {a_t:.2f}  F_T = {f_text}")
    return 0


def _cmd_report(args) -> int:
    run_dirs = find_run_dirs(args.out)
    if not run_dirs:
        raise ConfigurationError(f"no run reports found under {args.out!r}")
    records = [load_run_record(d) for d in run_dirs]
    rows = aggregate(records)
    write_results(rows, args.out)
    print(format_results_table(rows))
    return 0


def _cmd_plot(args) -> int:
    run_dirs = find_run_dirs(args.out)
    if not run_dirs:
        raise ConfigurationError(f"no run reports found under {args.out!r}")
    records = [load_run_record(d) for d in run_dirs]
    modes = sorted({mode for record in records for mode in record.matrices})
    for mode in modes:
        path = os.path.join(args.out, f"accuracy_{mode}.png")
        plot_accuracy_over_tasks(records, mode, path)
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "plot":
            return _cmd_plot(args)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
