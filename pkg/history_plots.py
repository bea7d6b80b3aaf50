"""SVG panels of a run, regenerated from the CSV files of its directory.

Figures are built on ``matplotlib.figure.Figure`` rather than pyplot so that
experiments on worker threads can render without shared global state.
"""
import logging
import os
from typing import List

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.figure import Figure

from experiment_harness import load_history
from stability_analysis import MATRIX_NAMES, PRODUCT_NAMES, ConvergenceHistory

logger = logging.getLogger(__name__)

# fixed ids and no timestamp keep the SVG text stable across runs
matplotlib.rcParams["svg.hashsalt"] = "krylov-gap"
SVG_METADATA = {"Date": None}

RESIDUALS_SVG = "residuals.svg"
MATRICES_SVG = "propagation_matrices.svg"
PRODUCTS_SVG = "product_columns.svg"


def _new_axes(title: str, ylabel: str):
    fig = Figure(figsize=(6.4, 4.8))
    ax = fig.add_subplot(1, 1, 1)
    ax.set_title(title)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log", nonpositive="mask")
    ax.grid(True, which="major", alpha=0.4)
    return fig, ax


def _save(fig: Figure, path: str) -> str:
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    logger.info(f"Wrote {path}")
    return path


def _mark_replacements(ax, history: ConvergenceHistory):
    for i in history.replacement_iterations:
        ax.axvline(i, color="grey", linewidth=0.6, linestyle=":")


def plot_residuals(history: ConvergenceHistory, path: str) -> str:
    """Top panel: recursive and true residual, residual gap and the bound f^r."""
    iters = np.array([record.i for record in history.records])
    fig, ax = _new_axes(f"{history.method} on {history.problem}", "norm")
    ax.plot(iters, [record.true_residual_norm for record in history.records], label="||b - A x||")
    ax.plot(iters, [record.recursive_residual_norm for record in history.records], label="||r||")
    ax.plot(iters, [record.gap_r for record in history.records], linestyle=":", label="residual gap")
    ax.plot(iters, [record.bound_f_r for record in history.records], linestyle="--", label="bound f^r")
    _mark_replacements(ax, history)
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)


def plot_propagation_matrices(history: ConvergenceHistory, path: str) -> str:
    """Middle panel: max-norms of the propagation matrices."""
    fig, ax = _new_axes(f"propagation matrices, {history.method}", "max-norm")
    if history.matrix_norms:
        values = np.array(history.matrix_norms)
        iters = np.arange(values.shape[0])
        for c, name in enumerate(MATRIX_NAMES):
            ax.plot(iters, values[:, c], label=name)
        ax.legend(loc="best", fontsize="small", ncol=2)
    _mark_replacements(ax, history)
    return _save(fig, path)


def plot_product_columns(history: ConvergenceHistory, path: str) -> str:
    """Bottom panel: max-norms of column i of the nine matrix products."""
    fig, ax = _new_axes(f"product column norms, {history.method}", "max-norm of column i")
    if history.column_norms:
        values = np.array(history.column_norms)
        iters = np.arange(values.shape[0])
        for c, name in enumerate(PRODUCT_NAMES):
            ax.plot(iters, values[:, c], label=name)
        ax.legend(loc="best", fontsize="small", ncol=3)
    _mark_replacements(ax, history)
    return _save(fig, path)


def render_run_plots(directory: str) -> List[str]:
    """Render all three panels of a run directory from its CSV files."""
    history = load_history(directory)
    return [
        plot_residuals(history, os.path.join(directory, RESIDUALS_SVG)),
        plot_propagation_matrices(history, os.path.join(directory, MATRICES_SVG)),
        plot_product_columns(history, os.path.join(directory, PRODUCTS_SVG)),
    ]
