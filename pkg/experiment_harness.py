"""Experiment runner: builds a problem, runs one solver with gap instrumentation
and writes the run directory (history.csv, coefficients.csv, matrix_norms.csv,
run.json and optionally the SVG panels)."""
import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from krylov_solvers import SolveOptions, SolveResult, StoppingNorm, solve
from preconditioner import IdentityPreconditioner, Preconditioner, icc0_factor
from sparse_core import (
    PROBLEM_TABLE,
    CsrMatrix,
    ProblemId,
    StencilSpec,
    has_symmetric_pattern,
    is_numerically_symmetric,
    norm2,
    read_matrix_market,
    right_hand_side,
    stencil_matrix,
    validate_spec,
)
from stability_analysis import (
    MATRIX_NAMES,
    PRODUCT_NAMES,
    CoefficientTrace,
    ConvergenceHistory,
    GapInstrument,
    GapRecord,
    ReplacementPolicy,
    bound_constants,
)

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.csv"
COEFFICIENTS_FILE = "coefficients.csv"
MATRIX_NORMS_FILE = "matrix_norms.csv"
RUN_FILE = "run.json"

HISTORY_COLUMNS = (
    ["iter", "rec_resid", "true_resid", "gap_r", "gap_s", "gap_w", "gap_z", "gap_k", "gap_l", "bound_fr"]
    + [f"col_norm_{name}" for name in PRODUCT_NAMES]
    + ["replaced"]
)
COEFFICIENT_COLUMNS = ["iter", "alpha", "beta", "omega"]
MATRIX_NORM_COLUMNS = ["iter"] + [f"norm_{name}" for name in MATRIX_NAMES]


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class SolverKind(str, Enum):
    CG = "cg"
    PCG_PIPELINED = "pcg_pipelined"
    BICGSTAB = "bicgstab"
    BICGSTAB_PIPELINED = "bicgstab_pipelined"


SOLVER_ALIASES = {
    "pbicgstab": SolverKind.BICGSTAB_PIPELINED,
    "p-bicgstab": SolverKind.BICGSTAB_PIPELINED,
    "pcg": SolverKind.PCG_PIPELINED,
    "p-cg": SolverKind.PCG_PIPELINED,
}


class PreconditionerKind(str, Enum):
    NONE = "none"
    ICC0 = "icc0"


def parse_solver(text: str) -> SolverKind:
    key = text.strip().lower()
    if key in SOLVER_ALIASES:
        return SOLVER_ALIASES[key]
    try:
        return SolverKind(key)
    except ValueError:
        raise ConfigError(f"unknown solver: {text!r}")


def default_output_dir() -> str:
    return os.environ.get("KRYLOV_GAP_OUTPUT_DIR", "results")


def worker_count() -> int:
    """Thread cap from KRYLOV_GAP_THREADS, else the CPU count."""
    value = os.environ.get("KRYLOV_GAP_THREADS")
    if not value:
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"KRYLOV_GAP_THREADS must be an integer, got {value!r}")
    if count < 1:
        raise ConfigError(f"KRYLOV_GAP_THREADS must be >= 1, got {count}")
    return count


CONFIG_KEYS = {
    "problem", "solver", "precond", "rr", "tol", "max_iters", "breakdown_eps", "stopping_norm",
    "stagnation_window", "nx", "ny", "nz", "eps", "normalize", "out", "plots", "label", "matrix",
}


@dataclass
class ExperimentConfig:
    """One solver run on one problem."""

    problem: Optional[StencilSpec] = None
    solver: SolverKind = SolverKind.BICGSTAB
    preconditioner: Optional[PreconditionerKind] = None
    policy: ReplacementPolicy = field(default_factory=ReplacementPolicy.none)
    opts: SolveOptions = field(default_factory=SolveOptions)
    output_dir: str = field(default_factory=default_output_dir)
    emit_plots: bool = False
    seed_label: str = ""
    matrix_path: Optional[str] = None

    def resolved_preconditioner(self) -> PreconditionerKind:
        """Explicit choice, else the table default of the problem, else none."""
        if self.preconditioner is not None:
            return self.preconditioner
        if self.problem is not None:
            return PreconditionerKind(PROBLEM_TABLE[self.problem.problem_id].preconditioner)
        return PreconditionerKind.NONE

    def validate(self):
        if (self.problem is None) == (self.matrix_path is None):
            raise ConfigError("exactly one of a test problem or a matrix file is required")
        if self.matrix_path is not None and not os.path.isfile(self.matrix_path):
            raise ConfigError(f"matrix file not found: {self.matrix_path}")
        if self.problem is not None:
            try:
                validate_spec(self.problem)
            except ValueError as e:
                raise ConfigError(str(e)) from e

    @classmethod
    def from_mapping(cls, data: Dict) -> "ExperimentConfig":
        """Build from a flat mapping whose keys mirror the CLI flags."""
        unknown = set(data) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            matrix = data.get("matrix")
            problem = None
            if not matrix:
                problem = StencilSpec(
                    data.get("problem", "TP1"),
                    nx=_optional_int(data.get("nx")),
                    ny=_optional_int(data.get("ny")),
                    nz=_optional_int(data.get("nz")),
                    epsilon=None if data.get("eps") is None else float(data["eps"]),
                    normalize=bool(data.get("normalize", True)),
                )
            opts = SolveOptions(
                tol=float(data.get("tol", 1e-6)),
                max_iters=int(data.get("max_iters", 20000)),
                breakdown_eps=float(data.get("breakdown_eps", 1e-30)),
                stopping_norm=StoppingNorm(data.get("stopping_norm", "recursive")),
                stagnation_window=int(data.get("stagnation_window", 5000)),
            )
            precond = data.get("precond")
            config = cls(
                problem=problem,
                solver=parse_solver(str(data.get("solver", "bicgstab"))),
                preconditioner=PreconditionerKind(precond) if precond else None,
                policy=ReplacementPolicy.parse(str(data.get("rr", "none"))),
                opts=opts,
                output_dir=str(data.get("out") or default_output_dir()),
                emit_plots=bool(data.get("plots", False)),
                seed_label=str(data.get("label", "")),
                matrix_path=str(matrix) if matrix else None,
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
        config.validate()
        return config

    def to_mapping(self) -> Dict:
        data = {
            "solver": self.solver.value,
            "precond": self.resolved_preconditioner().value,
            "rr": self.policy.describe(),
            "tol": self.opts.tol,
            "max_iters": self.opts.max_iters,
            "breakdown_eps": self.opts.breakdown_eps,
            "stopping_norm": self.opts.stopping_norm.value,
            "stagnation_window": self.opts.stagnation_window,
            "plots": self.emit_plots,
            "label": self.seed_label,
        }
        if self.problem is not None:
            data.update(
                problem=self.problem.problem_id.value,
                nx=self.problem.nx,
                ny=self.problem.ny,
                nz=self.problem.nz if self.problem.is_3d else None,
                eps=self.problem.epsilon,
                normalize=self.problem.normalize,
            )
        else:
            data["matrix"] = self.matrix_path
        return data


def _optional_int(value) -> Optional[int]:
    return None if value is None else int(value)


def load_config_file(path: str) -> Dict:
    """JSON experiment file; keys mirror the CLI flags."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


# ---------------------------------------------------------------------------
# Problem setup
# ---------------------------------------------------------------------------

def build_problem(cfg: ExperimentConfig) -> Tuple[CsrMatrix, np.ndarray, str]:
    """System matrix, b = A·(1/√N) and a display label."""
    if cfg.matrix_path is not None:
        A = read_matrix_market(cfg.matrix_path)
        if not A.is_square:
            raise ConfigError(f"{cfg.matrix_path}: matrix must be square, got {A.shape}")
        label = os.path.basename(cfg.matrix_path)
    else:
        A = stencil_matrix(cfg.problem)
        label = cfg.problem.label()
    return A, right_hand_side(A), label


def build_preconditioner(kind: PreconditionerKind, A: CsrMatrix) -> Preconditioner:
    if kind is PreconditionerKind.NONE:
        return IdentityPreconditioner(A.n_rows)
    if not has_symmetric_pattern(A):
        raise ConfigError("icc0 requires a problem with a symmetric sparsity pattern")
    return icc0_factor(A)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return repr(float(value))


def write_history_csv(path: str, history: ConvergenceHistory):
    empty = (math.nan,) * len(PRODUCT_NAMES)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for index, record in enumerate(history.records):
            columns = history.column_norms[index] if index < len(history.column_norms) else empty
            writer.writerow(
                [record.i]
                + [_fmt(value) for value in (
                    record.recursive_residual_norm, record.true_residual_norm,
                    record.gap_r, record.gap_s, record.gap_w, record.gap_z, record.gap_k, record.gap_l,
                    record.bound_f_r,
                )]
                + [_fmt(value) for value in columns]
                + [int(record.replaced)]
            )


def parse_history_csv(path: str) -> Tuple[List[GapRecord], List[Tuple[float, ...]]]:
    """Records and product column norms of a history.csv file."""
    records, column_norms = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            records.append(GapRecord(
                i=int(row["iter"]),
                recursive_residual_norm=float(row["rec_resid"]),
                true_residual_norm=float(row["true_resid"]),
                gap_r=float(row["gap_r"]),
                gap_s=float(row["gap_s"]),
                gap_w=float(row["gap_w"]),
                gap_z=float(row["gap_z"]),
                gap_k=float(row["gap_k"]),
                gap_l=float(row["gap_l"]),
                bound_f_r=float(row["bound_fr"]),
                replaced=row["replaced"] == "1",
            ))
            column_norms.append(tuple(float(row[f"col_norm_{name}"]) for name in PRODUCT_NAMES))
    return records, column_norms


def write_coefficients_csv(path: str, trace: CoefficientTrace):
    """One row per β index; the last row has no α or ω."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(COEFFICIENT_COLUMNS)
        for j, beta in enumerate(trace.betas):
            alpha = trace.alphas[j] if j < len(trace.alphas) else math.nan
            omega = trace.omegas[j] if j < len(trace.omegas) else math.nan
            writer.writerow([j, _fmt(alpha), _fmt(beta), _fmt(omega)])


def parse_coefficients_csv(path: str) -> CoefficientTrace:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    trace = CoefficientTrace(betas=[float(row["beta"]) for row in rows])
    for row in rows[:-1]:
        trace.record(float(row["alpha"]), float(row["omega"]))
    return trace


def write_matrix_norms_csv(path: str, matrix_norms: Sequence[Tuple[float, ...]]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MATRIX_NORM_COLUMNS)
        for i, norms in enumerate(matrix_norms):
            writer.writerow([i] + [_fmt(value) for value in norms])


def parse_matrix_norms_csv(path: str) -> List[Tuple[float, ...]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [tuple(float(row[name]) for name in MATRIX_NORM_COLUMNS[1:]) for row in csv.DictReader(f)]


def load_history(directory: str) -> ConvergenceHistory:
    """Rebuild a ConvergenceHistory from a run directory."""
    records, column_norms = parse_history_csv(os.path.join(directory, HISTORY_FILE))
    coefficients_path = os.path.join(directory, COEFFICIENTS_FILE)
    trace = parse_coefficients_csv(coefficients_path) if os.path.exists(coefficients_path) else CoefficientTrace()
    norms_path = os.path.join(directory, MATRIX_NORMS_FILE)
    matrix_norms = parse_matrix_norms_csv(norms_path) if os.path.exists(norms_path) else []
    meta = {}
    run_path = os.path.join(directory, RUN_FILE)
    if os.path.exists(run_path):
        with open(run_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    return ConvergenceHistory(
        records=records,
        trace=trace,
        status=meta.get("status", "unknown"),
        method=meta.get("config", {}).get("solver", "unknown"),
        problem=meta.get("problem", ""),
        tol=meta.get("config", {}).get("tol", math.nan),
        norm_b=meta.get("norm_b", math.nan),
        column_norms=column_norms,
        matrix_norms=matrix_norms,
    )


def _run_metadata(cfg: ExperimentConfig, result: SolveResult, label: str, A: CsrMatrix, b: np.ndarray, consts) -> Dict:
    return {
        "config": cfg.to_mapping(),
        "problem": label,
        "status": result.status.value,
        "iterations": result.iterations,
        "replacements": result.replacements,
        "message": result.message,
        "n": A.n_rows,
        "norm_b": norm2(b),
        "norm_a_estimate": consts.norm_a,
        "norm_minv_estimate": consts.norm_minv,
        "mu": consts.mu,
        "mu_tilde": consts.mu_tilde,
        "counts": asdict(result.counts),
    }


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> ConvergenceHistory:
    """Run one configured experiment and write its output directory.

    Breakdowns do not raise: the history up to the breakdown is written and
    its status says so.
    """
    cfg.validate()
    A, b, label = build_problem(cfg)
    kind = cfg.resolved_preconditioner()
    M = build_preconditioner(kind, A)
    if cfg.solver in (SolverKind.CG, SolverKind.PCG_PIPELINED) and not is_numerically_symmetric(A):
        logger.warning(f"{cfg.solver.value} applied to unsymmetric problem {label}")

    consts = bound_constants(A, M)
    instr = GapInstrument(A, M, b, consts)
    x0 = np.zeros(A.n_rows)
    logger.info(f"Running {cfg.solver.value} on {label} with {kind.value}, rr={cfg.policy.describe()}")
    result = solve(cfg.solver.value, A, M, b, x0, cfg.opts, cfg.policy, instr)
    history = replace(result.history, problem=label)

    os.makedirs(cfg.output_dir, exist_ok=True)
    write_history_csv(os.path.join(cfg.output_dir, HISTORY_FILE), history)
    write_coefficients_csv(os.path.join(cfg.output_dir, COEFFICIENTS_FILE), history.trace)
    write_matrix_norms_csv(os.path.join(cfg.output_dir, MATRIX_NORMS_FILE), history.matrix_norms)
    with open(os.path.join(cfg.output_dir, RUN_FILE), "w", encoding="utf-8") as f:
        json.dump(_run_metadata(cfg, result, label, A, b, consts), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {cfg.output_dir}/{HISTORY_FILE} ({len(history.records)} records)")

    if cfg.emit_plots:
        from history_plots import render_run_plots
        try:
            render_run_plots(cfg.output_dir)
        except Exception as e:
            logger.error(f"Error rendering plots for {cfg.output_dir}: {e}")
    return history


def run_experiments(configs: Sequence[ExperimentConfig]) -> List[ConvergenceHistory]:
    """Independent experiments on a thread pool capped by KRYLOV_GAP_THREADS, results in input order."""
    workers = min(worker_count(), max(len(configs), 1))
    if workers == 1:
        return [run_experiment(cfg) for cfg in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_experiment, cfg) for cfg in configs]
        return [future.result() for future in futures]


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSummary:
    label: str
    problem: str
    status: str
    iterations: int
    iterations_to_tol: Optional[int]
    final_true_residual: float
    min_true_residual: float
    replacements: int
    max_column_norm: float


def summarize(history: ConvergenceHistory) -> RunSummary:
    records = history.records
    true_norms = [record.true_residual_norm for record in records]
    # same threshold as the solvers: tol·||b||; unknown ||b|| leaves iterations_to_tol unset
    target = history.tol * history.norm_b
    reached = next((record.i for record in records if record.recursive_residual_norm <= target), None)
    column_max = max((max(norms) for norms in history.column_norms), default=math.nan)
    return RunSummary(
        label=history.method,
        problem=history.problem,
        status=history.status,
        iterations=history.iterations,
        iterations_to_tol=reached,
        final_true_residual=true_norms[-1] if true_norms else math.nan,
        min_true_residual=float(np.nanmin(true_norms)) if true_norms else math.nan,
        replacements=len(history.replacement_iterations),
        max_column_norm=column_max,
    )


def compare_runs(histories: Sequence[ConvergenceHistory]) -> List[RunSummary]:
    """Per-run summary rows; all histories must come from the same problem."""
    if len(histories) < 2:
        raise ConfigError(f"compare needs at least 2 runs, got {len(histories)}")
    problems = {history.problem for history in histories}
    if len(problems) > 1:
        raise ConfigError(f"runs come from different problems: {', '.join(sorted(problems))}")
    return [summarize(history) for history in histories]


def format_summary_table(summaries: Sequence[RunSummary]) -> str:
    header = ["solver", "status", "iters", "iters_to_tol", "final_true", "min_true", "replacements", "max_col_norm"]
    rows = [header]
    for s in summaries:
        rows.append([
            s.label, s.status, str(s.iterations),
            "-" if s.iterations_to_tol is None else str(s.iterations_to_tol),
            f"{s.final_true_residual:.3e}", f"{s.min_true_residual:.3e}",
            str(s.replacements), f"{s.max_column_norm:.3e}",
        ])
    return _format_rows(rows)


def list_problems() -> List[Dict]:
    """Registry of the shipped test problems at their default sizes."""
    problems = []
    for pid in ProblemId:
        defaults = PROBLEM_TABLE[pid]
        spec = StencilSpec(pid)
        problems.append({
            "id": pid.value,
            "n": spec.n,
            "grid": "x".join(str(d) for d in (defaults.grid if spec.is_3d else defaults.grid[:2])),
            "stencil": defaults.stencil,
            "epsilon": defaults.epsilon,
            "preconditioner": defaults.preconditioner,
            "symmetric": defaults.symmetric,
            "note": defaults.note,
        })
    return problems


def format_problem_table(problems: Sequence[Dict]) -> str:
    rows = [["id", "N", "grid", "stencil", "eps", "precond", "note"]]
    for p in problems:
        rows.append([
            p["id"], f"{p['n']:,}", p["grid"], p["stencil"],
            "-" if p["epsilon"] is None else repr(p["epsilon"]),
            "ICC(0)" if p["preconditioner"] == "icc0" else "none",
            p["note"],
        ])
    return _format_rows(rows)


def _format_rows(rows: List[List[str]]) -> str:
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows)
