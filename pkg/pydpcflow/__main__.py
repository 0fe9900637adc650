import argparse
import logging
from pathlib import Path

from .dpcflow_experiment import (
    ExperimentConfig,
    Method,
    emit_reports,
    profile_stages,
    run_experiment,
    stage_report,
    sweep_truncation,
)
from .dpcflow_workflow import build_dpc_dag, export_topology


def int_list(arg: str) -> list[int]:
    try:
        return [int(part) for part in arg.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"Argument `{arg}` is not a comma-separated list of integers") from err


parser = argparse.ArgumentParser(prog="pydpcflow", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
parser.add_argument("--verbose", "-v", help="More verbose output (up to 2 times)", action="count", default=0)
commands = parser.add_subparsers(dest="command", required=True)

run_parser = commands.add_parser("run", help="Run one closed-loop experiment")
run_parser.add_argument("--config", help="Experiment configuration file", type=Path, required=True)
run_parser.add_argument("--method", help="Override the configured method", choices=[_.value for _ in Method])
run_parser.add_argument("--output", help="Report directory (defaults to output_dir from the config)", type=Path)

sweep_parser = commands.add_parser("sweep", help="Compare retained singular value counts")
sweep_parser.add_argument("--config", help="Experiment configuration file", type=Path, required=True)
sweep_parser.add_argument("--keep", help="Retained counts", type=int_list, default=[100, 50, 20, 10, 5])
sweep_parser.add_argument("--output", help="Sweep CSV path", type=Path)

profile_parser = commands.add_parser("profile", help="Time the controller stages on random plants")
profile_parser.add_argument("--dims", help="Plant dimensions", type=int_list, default=[2, 4, 8, 16])
profile_parser.add_argument("--horizon", help="Prediction horizon N", type=int, default=10)
profile_parser.add_argument("--cols", help="Hankel columns j", type=int, default=1000)
profile_parser.add_argument("--cycles", help="Repetitions per dimension", type=int, default=10)
profile_parser.add_argument("--seed", help="Fixture seed", type=int, default=0)
profile_parser.add_argument("--output", help="Stage report CSV path", type=Path)

dag_parser = commands.add_parser("dag", help="Build the workflow task graph")
dag_parser.add_argument("--mpt", help="Maximal parallel tasks", type=int, required=True)
dag_parser.add_argument("--fold", help="Merges folded into the export task", type=int)
dag_parser.add_argument("--cols", help="Data columns to partition over the leaves", type=int)
dag_parser.add_argument("--print", help="Print the topology text", action="store_true")
dag_parser.add_argument("--output", help="Write the topology text here", type=Path)


def main(argv: list[str] | None = None) -> int:
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose)

    if args.command == "run":
        cfg = ExperimentConfig.from_file(args.config)
        if args.method:
            cfg = cfg.with_overrides(method=Method(args.method))
        record = run_experiment(cfg)
        for path in emit_reports(record, args.output):
            print(f"Wrote {path}")
        summary = record.summary()
        print(f"{summary.steps} ticks, rmse {summary.rmse:.6g}, {summary.held_ticks} held, diverged: {summary.diverged}")
    elif args.command == "sweep":
        cfg = ExperimentConfig.from_file(args.config)
        report = sweep_truncation(cfg, args.keep)
        output = args.output or Path(cfg.output_dir) / f"{cfg.plant.value}_sweep.csv"
        output.parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(output, index=False, float_format="%.10g")
        print(report.to_string(index=False))
        print(f"Wrote {output}")
    elif args.command == "profile":
        report = stage_report(profile_stages(args.dims, args.horizon, args.cols, args.cycles, args.seed))
        print(report.to_string(index=False))
        if args.output:
            report.to_csv(args.output, index=False, float_format="%.10g")
            print(f"Wrote {args.output}")
    else:
        dag = build_dpc_dag(args.mpt, args.fold, args.cols)
        text = export_topology(dag)
        if args.print or not args.output:
            print(text, end="")
        if args.output:
            args.output.write_text(text)
            print(f"Wrote {args.output}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
