#!/usr/bin/env python3
"""Run the four TP1 configurations behind the residual-gap figures and print a comparison."""
import logging
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dotenv import load_dotenv

from experiment_harness import (
    ExperimentConfig,
    compare_runs,
    default_output_dir,
    format_summary_table,
    run_experiments,
)

load_dotenv()
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

GRID = int(os.environ.get('TP1_GRID', '200'))
OUT = os.path.join(default_output_dir(), f'tp1_{GRID}')

RUNS = [
    ('bicgstab', 'none', 'bicgstab'),
    ('pbicgstab', 'none', 'bicgstab_pipelined'),
    ('pbicgstab', 'periodic:50', 'bicgstab_pipelined_periodic'),
    ('pbicgstab', 'auto', 'bicgstab_pipelined_auto'),
]

configs = [
    ExperimentConfig.from_mapping({
        'problem': 'TP1', 'nx': GRID, 'ny': GRID, 'solver': solver, 'rr': rr,
        'tol': 1e-300, 'max_iters': 400, 'plots': True, 'label': name,
        'out': os.path.join(OUT, name),
    })
    for solver, rr, name in RUNS
]

histories = run_experiments(configs)
print(f'\nTP1 {GRID}x{GRID}, 400 iterations past convergence:\n')
print(format_summary_table(compare_runs(histories)))
print(f'\nRun directories and SVG panels under {OUT}')
