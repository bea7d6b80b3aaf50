#!/usr/bin/env python3
"""Run classic and pipelined BiCGStab (plus CG on SPD problems) on every test problem at a reduced grid."""
import logging
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dotenv import load_dotenv

from experiment_harness import (
    ConfigError,
    ExperimentConfig,
    compare_runs,
    default_output_dir,
    format_summary_table,
    list_problems,
    run_experiments,
)

load_dotenv()
logging.basicConfig(
    level=logging.WARNING,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

GRID = int(os.environ.get('SUITE_GRID', '64'))
GRID_3D = int(os.environ.get('SUITE_GRID_3D', '16'))
OUT = os.path.join(default_output_dir(), 'suite')

for problem in list_problems():
    pid = problem['id']
    solvers = ['bicgstab', 'pbicgstab']
    if problem['symmetric']:
        solvers += ['cg', 'pcg']
    grid = {'nx': GRID_3D, 'ny': GRID_3D, 'nz': GRID_3D} if pid == 'TP5' else {'nx': GRID, 'ny': GRID}

    configs = [
        ExperimentConfig.from_mapping({
            'problem': pid, **grid, 'solver': solver, 'rr': 'auto' if solver in ('pbicgstab', 'pcg') else 'none',
            'tol': 1e-12, 'max_iters': 5000, 'out': os.path.join(OUT, pid, solver),
        })
        for solver in solvers
    ]
    try:
        histories = run_experiments(configs)
    except ConfigError as e:
        print(f'{pid}: skipped ({e})')
        continue
    print(f'\n{pid} ({problem["note"]})')
    print(format_summary_table(compare_runs(histories)))
