"""Unit tests for history_plots.py"""
import os
import shutil
import tempfile
import unittest

from experiment_harness import ExperimentConfig, load_history, run_experiment
from history_plots import (
    MATRICES_SVG,
    PRODUCTS_SVG,
    RESIDUALS_SVG,
    plot_residuals,
    render_run_plots,
)


class TestHistoryPlots(unittest.TestCase):
    def setUp(self):
        """Create temporary directory for tests."""
        self.test_dir = tempfile.mkdtemp()
        self.run_dir = os.path.join(self.test_dir, "run")
        run_experiment(ExperimentConfig.from_mapping({
            "problem": "TP1", "nx": 8, "ny": 8, "solver": "p-bicgstab", "rr": "periodic:3",
            "tol": 1e-10, "out": self.run_dir,
        }))

    def tearDown(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.test_dir)

    def test_render_writes_three_panels(self):
        paths = render_run_plots(self.run_dir)
        self.assertEqual([os.path.basename(p) for p in paths], [RESIDUALS_SVG, MATRICES_SVG, PRODUCTS_SVG])
        for path in paths:
            with open(path, "r", encoding="utf-8") as f:
                content = f.read()
            self.assertIn("<svg", content)

    def test_svg_output_is_stable(self):
        """Rendering the same run twice gives identical files."""
        first = []
        for path in render_run_plots(self.run_dir):
            with open(path, "rb") as f:
                first.append(f.read())
        for path, content in zip(render_run_plots(self.run_dir), first):
            with open(path, "rb") as f:
                self.assertEqual(f.read(), content)

    def test_residual_panel_names_the_run(self):
        history = load_history(self.run_dir)
        path = plot_residuals(history, os.path.join(self.test_dir, "panel.svg"))
        with open(path, "r", encoding="utf-8") as f:
            content = f.read()
        self.assertIn("bicgstab_pipelined", content)

    def test_plots_flag_on_run(self):
        out = os.path.join(self.test_dir, "with_plots")
        run_experiment(ExperimentConfig.from_mapping({
            "problem": "TP1", "nx": 6, "ny": 6, "solver": "cg", "plots": True, "out": out,
        }))
        for name in (RESIDUALS_SVG, MATRICES_SVG, PRODUCTS_SVG):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)


if __name__ == '__main__':
    unittest.main()
