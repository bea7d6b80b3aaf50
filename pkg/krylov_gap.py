"""Command-line entry point.

    python krylov_gap.py run --problem TP1 --solver bicgstab pbicgstab --rr auto --out results/tp1
    python krylov_gap.py list-problems
    python krylov_gap.py compare results/tp1/bicgstab results/tp1/bicgstab_pipelined
    python krylov_gap.py plot results/tp1/bicgstab
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from experiment_harness import (
    ConfigError,
    ExperimentConfig,
    compare_runs,
    format_problem_table,
    format_summary_table,
    list_problems,
    load_config_file,
    load_history,
    parse_solver,
    run_experiments,
)
from krylov_solvers import BreakdownError, SolveStatus
from preconditioner import FactorizationError
from sparse_core import DimensionMismatchError, InvalidProblemError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_BREAKDOWN = 2
EXIT_CONFIG = 3

# CLI destination -> config file key
RUN_FLAGS = {
    "problem": "problem",
    "matrix": "matrix",
    "precond": "precond",
    "rr": "rr",
    "tol": "tol",
    "max_iters": "max_iters",
    "breakdown_eps": "breakdown_eps",
    "stopping_norm": "stopping_norm",
    "stagnation_window": "stagnation_window",
    "nx": "nx",
    "ny": "ny",
    "nz": "nz",
    "eps": "eps",
    "normalize": "normalize",
    "out": "out",
    "plots": "plots",
    "label": "label",
}


def configure_logging():
    level = os.environ.get("KRYLOV_GAP_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krylov_gap",
        description="Residual-gap experiments for classic and pipelined Krylov solvers",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # defaults stay None so that only flags given on the command line override the config file
    run = subparsers.add_parser("run", help="Run one or more solvers on a problem")
    run.add_argument("--config", help="JSON file whose keys mirror these flags")
    run.add_argument("--problem", help="Test problem id, TP1..TP5")
    run.add_argument("--matrix", help="Matrix Market file used instead of a test problem")
    run.add_argument("--solver", nargs="+", help="cg, pcg, bicgstab or pbicgstab (several allowed)")
    run.add_argument("--precond", choices=["none", "icc0"], help="Preconditioner, default from the problem table")
    run.add_argument("--rr", help="Residual replacement: none, auto, auto:<tau> or periodic:<P>")
    run.add_argument("--tol", type=float, help="Stop once ||r_i|| <= tol·||b||")
    run.add_argument("--max-iters", dest="max_iters", type=int, help="Iteration cap")
    run.add_argument("--breakdown-eps", dest="breakdown_eps", type=float, help="Breakdown threshold on denominators")
    run.add_argument("--stopping-norm", dest="stopping_norm", choices=["recursive", "true_residual"])
    run.add_argument("--stagnation-window", dest="stagnation_window", type=int)
    run.add_argument("--nx", type=int)
    run.add_argument("--ny", type=int)
    run.add_argument("--nz", type=int)
    run.add_argument("--eps", type=float, help="TP2 off-diagonal perturbation, TP3/TP5 diagonal shift")
    run.add_argument("--normalize", dest="normalize", action="store_true", default=None)
    run.add_argument("--no-normalize", dest="normalize", action="store_false")
    run.add_argument("--out", help="Output directory, default $KRYLOV_GAP_OUTPUT_DIR or results")
    run.add_argument("--plots", action="store_true", default=None, help="Also write the SVG panels")
    run.add_argument("--label", help="Free-form label stored in run.json")

    problems = subparsers.add_parser("list-problems", help="Print the test problem registry")
    problems.add_argument("--json", action="store_true", help="Print JSON instead of a table")

    compare = subparsers.add_parser("compare", help="Summarize two or more run directories")
    compare.add_argument("dirs", nargs="+", help="Run directories written by 'run'")
    compare.add_argument("--json", action="store_true", help="Print JSON instead of a table")

    plot = subparsers.add_parser("plot", help="Regenerate the SVG panels of run directories")
    plot.add_argument("dirs", nargs="+")
    return parser


def merge_run_settings(args: argparse.Namespace) -> Dict:
    """Defaults < config file < command-line flags."""
    data = load_config_file(args.config) if args.config else {}
    for dest, key in RUN_FLAGS.items():
        value = getattr(args, dest)
        if value is not None:
            data[key] = value
    if args.solver:
        data["solver"] = list(args.solver)
    return data


def experiment_configs(data: Dict) -> List[ExperimentConfig]:
    """One config per requested solver; with several solvers each gets OUT/<solver>."""
    solvers = data.get("solver", "bicgstab")
    if isinstance(solvers, str):
        solvers = [solvers]
    if not solvers:
        raise ConfigError("at least one solver is required")
    kinds = [parse_solver(str(name)) for name in solvers]
    if len(set(kinds)) != len(kinds):
        raise ConfigError(f"duplicate solvers: {', '.join(str(name) for name in solvers)}")

    base = ExperimentConfig.from_mapping({**data, "solver": kinds[0].value})
    if len(kinds) == 1:
        return [base]
    return [
        replace(base, solver=kind, output_dir=os.path.join(base.output_dir, kind.value))
        for kind in kinds
    ]


def cmd_run(args: argparse.Namespace) -> int:
    configs = experiment_configs(merge_run_settings(args))
    histories = run_experiments(configs)
    exit_code = EXIT_OK
    for cfg, history in zip(configs, histories):
        print(f"{cfg.solver.value}: {history.status} after {history.iterations} iterations "
              f"({len(history.replacement_iterations)} replacements) -> {cfg.output_dir}")
        if history.status == SolveStatus.BREAKDOWN.value:
            logger.error(f"{cfg.solver.value} broke down on {history.problem}")
            exit_code = EXIT_BREAKDOWN
    return exit_code


def cmd_list_problems(args: argparse.Namespace) -> int:
    problems = list_problems()
    if args.json:
        print(json.dumps(problems, indent=2))
    else:
        print(format_problem_table(problems))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    histories = [load_history(directory) for directory in args.dirs]
    summaries = compare_runs(histories)
    if args.json:
        print(json.dumps([asdict(s) for s in summaries], indent=2))
    else:
        print(format_summary_table(summaries))
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    from history_plots import render_run_plots

    for directory in args.dirs:
        for path in render_run_plots(directory):
            print(path)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "list-problems": cmd_list_problems,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except BreakdownError as e:
        logger.error(f"Solver breakdown: {e}")
        return EXIT_BREAKDOWN
    except (ConfigError, InvalidProblemError, FactorizationError, DimensionMismatchError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        logger.error(f"Error in {args.command}: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
