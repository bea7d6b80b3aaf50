"""Unit tests for the krylov_gap command line"""
import io
import json
import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from krylov_gap import EXIT_BREAKDOWN, EXIT_CONFIG, EXIT_OK, build_parser, experiment_configs, main, merge_run_settings
from sparse_core import CsrMatrix, write_matrix_market


class TestKrylovGapCli(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def run_cli(self, *argv):
        with patch('sys.stdout', new_callable=io.StringIO) as stdout:
            code = main(list(argv))
        return code, stdout.getvalue()

    def small_run(self, out, *solvers):
        return self.run_cli("run", "--problem", "TP1", "--nx", "8", "--ny", "8", "--tol", "1e-10",
                            "--solver", *solvers, "--out", out)

    def test_list_problems_json(self):
        code, output = self.run_cli("list-problems", "--json")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual([p["id"] for p in json.loads(output)], ["TP1", "TP2", "TP3", "TP4", "TP5"])

    def test_list_problems_table(self):
        code, output = self.run_cli("list-problems")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("TP4", output)

    def test_single_solver_writes_to_out(self):
        out = os.path.join(self.test_dir, "single")
        code, output = self.small_run(out, "cg")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(out, "history.csv")))
        self.assertIn("cg: converged", output)

    def test_several_solvers_get_subdirectories(self):
        out = os.path.join(self.test_dir, "multi")
        code, _ = self.small_run(out, "bicgstab", "pbicgstab")
        self.assertEqual(code, EXIT_OK)
        for name in ("bicgstab", "bicgstab_pipelined"):
            self.assertTrue(os.path.exists(os.path.join(out, name, "history.csv")), name)

        code, output = self.run_cli("compare", os.path.join(out, "bicgstab"), os.path.join(out, "bicgstab_pipelined"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("bicgstab_pipelined", output)

        code, output = self.run_cli("compare", "--json", os.path.join(out, "bicgstab"), os.path.join(out, "bicgstab_pipelined"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(json.loads(output)), 2)

    def test_compare_needs_two_runs(self):
        out = os.path.join(self.test_dir, "one")
        self.small_run(out, "cg")
        code, _ = self.run_cli("compare", out)
        self.assertEqual(code, EXIT_CONFIG)

    def test_plot_command(self):
        out = os.path.join(self.test_dir, "plotted")
        self.small_run(out, "pcg")
        code, output = self.run_cli("plot", out)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(output.splitlines()), 3)
        self.assertTrue(os.path.exists(os.path.join(out, "residuals.svg")))

    def test_configuration_errors(self):
        out = os.path.join(self.test_dir, "bad")
        for argv in (
            ["run", "--problem", "TP7", "--out", out],
            ["run", "--problem", "TP1", "--nx", "1", "--out", out],
            ["run", "--problem", "TP1", "--rr", "sometimes", "--out", out],
            ["run", "--problem", "TP1", "--solver", "cg", "cg", "--out", out],
            ["run", "--matrix", os.path.join(self.test_dir, "missing.mtx"), "--out", out],
            ["compare", os.path.join(self.test_dir, "nowhere"), os.path.join(self.test_dir, "nowhere2")],
        ):
            with self.subTest(argv=argv):
                code, _ = self.run_cli(*argv)
                self.assertEqual(code, EXIT_CONFIG)

    def test_breakdown_exit_code(self):
        path = os.path.join(self.test_dir, "rotation.mtx")
        write_matrix_market(path, CsrMatrix.from_scipy(np.array([[0.0, 1.0], [-1.0, 0.0]])))
        code, output = self.run_cli("run", "--matrix", path, "--solver", "bicgstab",
                                    "--out", os.path.join(self.test_dir, "rotation"))
        self.assertEqual(code, EXIT_BREAKDOWN)
        self.assertIn("breakdown", output)

    def test_run_help_describes_tol_and_eps(self):
        with patch('sys.stdout', new_callable=io.StringIO) as stdout:
            with self.assertRaises(SystemExit):
                main(["run", "--help"])
        text = " ".join(stdout.getvalue().split())
        self.assertIn("tol·||b||", text)
        self.assertNotIn("||r_0||", text)
        self.assertIn("TP2 off-diagonal perturbation", text)
        self.assertIn("TP3/TP5 diagonal shift", text)

    def test_unknown_command(self):
        with patch('sys.stderr', new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                main(["solve"])


class TestRunSettings(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def test_flags_override_config_file(self):
        path = os.path.join(self.test_dir, "exp.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"problem": "TP4", "nx": 12, "ny": 12, "tol": 1e-8, "solver": "cg"}, f)
        args = build_parser().parse_args(["run", "--config", path, "--tol", "1e-10", "--solver", "pcg", "bicgstab"])
        data = merge_run_settings(args)
        self.assertEqual(data["problem"], "TP4")
        self.assertEqual(data["nx"], 12)
        self.assertEqual(data["tol"], 1e-10)
        self.assertEqual(data["solver"], ["pcg", "bicgstab"])

    def test_unset_flags_leave_file_values(self):
        args = build_parser().parse_args(["run", "--problem", "TP2"])
        data = merge_run_settings(args)
        self.assertEqual(data, {"problem": "TP2"})

    def test_output_layout(self):
        data = {"problem": "TP1", "solver": ["cg", "pcg"], "out": self.test_dir}
        configs = experiment_configs(data)
        self.assertEqual([c.output_dir for c in configs],
                         [os.path.join(self.test_dir, "cg"), os.path.join(self.test_dir, "pcg_pipelined")])
        single = experiment_configs({"problem": "TP1", "solver": "cg", "out": self.test_dir})
        self.assertEqual(single[0].output_dir, self.test_dir)


if __name__ == '__main__':
    unittest.main()
