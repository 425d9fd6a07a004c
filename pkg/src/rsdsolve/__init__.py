"""Recursive Schur decomposition preconditioning for long, thin FEM domains."""
from .bench_harness import ProblemConfig, SolveReport, run_experiment, sweep, verify_small
from .fem_assembly import PdeKind, assemble, element_matrix, manufactured_problem
from .grid_tree import ConfigurationError, Grid, DomainTree, TreeNode, build_grid, build_tree, compute_index_sets
from .linalg_core import band_factor, band_solve, extract_block, gmres_fixed_steps, gmres_flexible, spmv
from .rsd_solver import RsdPreconditioner, rsd_apply, rsd_setup, schur_matvec

__version__ = "0.1.0"
