"""Unit tests for experiment_harness.py"""
import json
import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from experiment_harness import (
    COEFFICIENTS_FILE,
    HISTORY_FILE,
    MATRIX_NORMS_FILE,
    RUN_FILE,
    ConfigError,
    ExperimentConfig,
    PreconditionerKind,
    SolverKind,
    compare_runs,
    format_problem_table,
    format_summary_table,
    list_problems,
    load_config_file,
    load_history,
    parse_coefficients_csv,
    parse_history_csv,
    parse_solver,
    run_experiment,
    run_experiments,
    summarize,
    worker_count,
    write_coefficients_csv,
    write_history_csv,
)
from krylov_solvers import SolveOptions, bicgstab_classic
from preconditioner import IdentityPreconditioner
from sparse_core import (
    CsrMatrix,
    ProblemId,
    StencilSpec,
    norm2,
    right_hand_side,
    stencil_matrix,
    to_dense,
    write_matrix_market,
)
from stability_analysis import ConvergenceHistory, ReplacementKind


class TestExperimentConfig(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def test_defaults(self):
        cfg = ExperimentConfig.from_mapping({"out": self.test_dir})
        self.assertEqual(cfg.problem.problem_id, ProblemId.TP1)
        self.assertEqual(cfg.solver, SolverKind.BICGSTAB)
        self.assertEqual(cfg.resolved_preconditioner(), PreconditionerKind.ICC0)
        self.assertEqual(cfg.policy.kind, ReplacementKind.NONE)
        self.assertEqual(cfg.opts.tol, 1e-6)

    def test_table_default_preconditioner(self):
        cfg = ExperimentConfig.from_mapping({"problem": "TP2", "nx": 8, "ny": 8, "out": self.test_dir})
        self.assertEqual(cfg.resolved_preconditioner(), PreconditionerKind.NONE)
        cfg = ExperimentConfig.from_mapping({"problem": "TP2", "precond": "icc0", "out": self.test_dir})
        self.assertEqual(cfg.resolved_preconditioner(), PreconditionerKind.ICC0)

    def test_solver_aliases(self):
        self.assertEqual(parse_solver("p-BiCGStab"), SolverKind.BICGSTAB_PIPELINED)
        self.assertEqual(parse_solver("pcg"), SolverKind.PCG_PIPELINED)
        self.assertEqual(parse_solver("cg"), SolverKind.CG)
        with self.assertRaises(ConfigError):
            parse_solver("gmres")

    def test_invalid_mappings(self):
        bad = [
            {"problem": "TP9"},
            {"nx": 1},
            {"problem": "TP3", "eps": 1.5},
            {"rr": "sometimes"},
            {"tol": -1},
            {"grid": 10},
            {"matrix": os.path.join(self.test_dir, "missing.mtx")},
        ]
        for data in bad:
            with self.subTest(data=data):
                with self.assertRaises(ConfigError):
                    ExperimentConfig.from_mapping(data)

    def test_problem_or_matrix_required(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig(output_dir=self.test_dir).validate()

    def test_mapping_round_trip(self):
        data = {"problem": "TP3", "nx": 10, "ny": 12, "eps": 0.01, "solver": "p-bicgstab", "rr": "periodic:7",
                "tol": 1e-9, "out": self.test_dir}
        cfg = ExperimentConfig.from_mapping(data)
        again = ExperimentConfig.from_mapping(dict(cfg.to_mapping(), out=self.test_dir))
        self.assertEqual(again.to_mapping(), cfg.to_mapping())
        self.assertEqual(cfg.to_mapping()["rr"], "periodic:7")

    def test_load_config_file(self):
        path = os.path.join(self.test_dir, "exp.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"problem": "TP4", "solver": "cg"}, f)
        self.assertEqual(load_config_file(path)["problem"], "TP4")
        with open(path, "w", encoding="utf-8") as f:
            f.write("[1, 2]")
        with self.assertRaises(ConfigError):
            load_config_file(path)
        with self.assertRaises(ConfigError):
            load_config_file(os.path.join(self.test_dir, "nope.json"))

    def test_worker_count(self):
        with patch.dict(os.environ, {"KRYLOV_GAP_THREADS": "3"}):
            self.assertEqual(worker_count(), 3)
        for value in ("0", "many"):
            with patch.dict(os.environ, {"KRYLOV_GAP_THREADS": value}):
                with self.assertRaises(ConfigError):
                    worker_count()

    def test_output_dir_from_environment(self):
        with patch.dict(os.environ, {"KRYLOV_GAP_OUTPUT_DIR": self.test_dir}):
            self.assertEqual(ExperimentConfig.from_mapping({}).output_dir, self.test_dir)


class TestRunExperiment(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def config(self, name, **extra):
        data = {"problem": "TP1", "nx": 8, "ny": 8, "tol": 1e-10, "out": os.path.join(self.test_dir, name)}
        data.update(extra)
        return ExperimentConfig.from_mapping(data)

    def test_writes_run_directory(self):
        cfg = self.config("run", solver="p-bicgstab", rr="auto")
        history = run_experiment(cfg)
        for name in (HISTORY_FILE, COEFFICIENTS_FILE, MATRIX_NORMS_FILE, RUN_FILE):
            self.assertTrue(os.path.exists(os.path.join(cfg.output_dir, name)), name)
        with open(os.path.join(cfg.output_dir, RUN_FILE), "r", encoding="utf-8") as f:
            meta = json.load(f)
        self.assertEqual(meta["status"], "converged")
        self.assertEqual(meta["problem"], "TP1 8x8")
        self.assertEqual(meta["config"]["solver"], "bicgstab_pipelined")
        self.assertEqual(meta["counts"]["spmv"], 3 + 2 * meta["iterations"])
        self.assertEqual(history.problem, "TP1 8x8")

    def test_history_reloads(self):
        cfg = self.config("run", solver="pcg")
        history = run_experiment(cfg)
        loaded = load_history(cfg.output_dir)
        self.assertEqual(loaded.records, history.records)
        self.assertEqual(loaded.method, "pcg_pipelined")
        self.assertEqual(loaded.problem, "TP1 8x8")
        self.assertEqual(loaded.trace.alphas, [float(a) for a in history.trace.alphas])

    def test_csv_files_rewrite_identically(self):
        """Writing a parsed history.csv or coefficients.csv again reproduces the same bytes."""
        cfg = self.config("run", solver="p-bicgstab")
        run_experiment(cfg)
        history_path = os.path.join(cfg.output_dir, HISTORY_FILE)
        records, columns = parse_history_csv(history_path)
        rewritten = os.path.join(self.test_dir, "again.csv")
        write_history_csv(rewritten, ConvergenceHistory(records=records, trace=None, status="", method="",
                                                        column_norms=columns))
        with open(history_path, "rb") as a, open(rewritten, "rb") as b:
            self.assertEqual(a.read(), b.read())

        coefficients_path = os.path.join(cfg.output_dir, COEFFICIENTS_FILE)
        rewritten = os.path.join(self.test_dir, "again_coefficients.csv")
        write_coefficients_csv(rewritten, parse_coefficients_csv(coefficients_path))
        with open(coefficients_path, "rb") as a, open(rewritten, "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_history_header(self):
        cfg = self.config("run")
        run_experiment(cfg)
        with open(os.path.join(cfg.output_dir, HISTORY_FILE), "r", encoding="utf-8") as f:
            header = f.readline().strip().split(",")
        self.assertEqual(header[:3], ["iter", "rec_resid", "true_resid"])
        self.assertEqual(header[-1], "replaced")

    def test_identity_matrix_file(self):
        """A = I from a Matrix Market file converges after one iteration."""
        path = os.path.join(self.test_dir, "identity.mtx")
        write_matrix_market(path, CsrMatrix.identity(5), symmetric=True)
        cfg = ExperimentConfig.from_mapping({"matrix": path, "out": os.path.join(self.test_dir, "identity")})
        history = run_experiment(cfg)
        self.assertEqual(history.status, "converged")
        self.assertEqual([record.i for record in history.records], [0, 1])
        self.assertEqual(history.problem, "identity.mtx")

    def test_breakdown_is_written_not_raised(self):
        path = os.path.join(self.test_dir, "rotation.mtx")
        write_matrix_market(path, CsrMatrix.from_scipy(np.array([[0.0, 1.0], [-1.0, 0.0]])))
        out = os.path.join(self.test_dir, "rotation")
        history = run_experiment(ExperimentConfig.from_mapping({"matrix": path, "out": out}))
        self.assertEqual(history.status, "breakdown")
        self.assertTrue(os.path.exists(os.path.join(out, HISTORY_FILE)))

    def test_deterministic_history(self):
        for name in ("a", "b"):
            run_experiment(self.config(name, solver="p-bicgstab", rr="auto"))
        with open(os.path.join(self.test_dir, "a", HISTORY_FILE), "rb") as a, \
                open(os.path.join(self.test_dir, "b", HISTORY_FILE), "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_run_experiments_keeps_order(self):
        configs = [self.config(solver, solver=solver) for solver in ("cg", "pcg", "bicgstab", "p-bicgstab")]
        with patch.dict(os.environ, {"KRYLOV_GAP_THREADS": "2"}):
            histories = run_experiments(configs)
        self.assertEqual([h.method for h in histories], ["cg", "pcg_pipelined", "bicgstab", "bicgstab_pipelined"])


class TestSummaries(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def run_solver(self, solver, nx=8):
        out = os.path.join(self.test_dir, f"{solver}-{nx}")
        cfg = ExperimentConfig.from_mapping({"problem": "TP1", "nx": nx, "ny": nx, "solver": solver, "out": out})
        return run_experiment(cfg)

    def test_summarize(self):
        summary = summarize(self.run_solver("bicgstab"))
        self.assertEqual(summary.status, "converged")
        self.assertEqual(summary.iterations_to_tol, summary.iterations)
        self.assertLessEqual(summary.min_true_residual, summary.final_true_residual)
        self.assertEqual(summary.max_column_norm, 1.0)

    def test_summarize_uses_rhs_norm_with_nonzero_guess(self):
        """iterations_to_tol follows the solver's tol·||b|| rule when ||r_0|| is much smaller than ||b||."""
        A = stencil_matrix(StencilSpec("TP1", nx=8, ny=8))
        b = right_hand_side(A)
        x0 = (1.0 - 1e-4) * np.linalg.solve(to_dense(A), b)
        result = bicgstab_classic(A, IdentityPreconditioner(A.n_rows), b, x0, SolveOptions(tol=1e-6))
        self.assertEqual(result.status.value, "converged")
        self.assertEqual(result.history.norm_b, norm2(b))
        self.assertLess(result.history.records[0].recursive_residual_norm, 1e-3 * norm2(b))
        summary = summarize(result.history)
        self.assertEqual(summary.iterations_to_tol, result.iterations)

    def test_rhs_norm_survives_reload(self):
        history = self.run_solver("bicgstab")
        loaded = load_history(os.path.join(self.test_dir, "bicgstab-8"))
        self.assertEqual(loaded.norm_b, history.norm_b)
        self.assertEqual(summarize(loaded).iterations_to_tol, summarize(history).iterations_to_tol)

    def test_compare_runs(self):
        summaries = compare_runs([self.run_solver("bicgstab"), self.run_solver("p-bicgstab")])
        self.assertEqual([s.label for s in summaries], ["bicgstab", "bicgstab_pipelined"])
        table = format_summary_table(summaries)
        self.assertIn("bicgstab_pipelined", table)
        self.assertEqual(len(table.splitlines()), 3)

    def test_compare_needs_two_runs_of_one_problem(self):
        with self.assertRaises(ConfigError):
            compare_runs([self.run_solver("cg")])
        with self.assertRaises(ConfigError):
            compare_runs([self.run_solver("cg", nx=8), self.run_solver("cg", nx=6)])

    def test_list_problems(self):
        problems = {p["id"]: p for p in list_problems()}
        self.assertEqual(sorted(problems), ["TP1", "TP2", "TP3", "TP4", "TP5"])
        self.assertEqual(problems["TP1"]["n"], 40_000)
        self.assertEqual(problems["TP2"]["n"], 1_000_000)
        self.assertEqual(problems["TP5"]["grid"], "50x50x50")
        self.assertFalse(problems["TP2"]["symmetric"])
        self.assertIn("ICC(0)", format_problem_table(list_problems()))


if __name__ == '__main__':
    unittest.main()
