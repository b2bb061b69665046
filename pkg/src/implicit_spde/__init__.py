"""Implicit Euler time stepping for monotone stochastic evolution equations.

The package discretises du = A(t, u) dt + sum_k B_k(t, u) dW^k on a periodic
finite-difference grid with time-averaged coefficients, probes the structural
assumptions (monotonicity, Lipschitz, growth, coercivity, parabolicity) of a
problem numerically, and measures strong convergence rates by Monte-Carlo
self-convergence on coupled Brownian paths.
"""

from .gallery import GALLERY, make_problem, quasilinear_spec
from .noise import BrownianLattice, coarsen, generate
from .problem import DeclaredConstants, EvolutionProblem, ParabolicityError, QuasilinearSpec, assemble_quasilinear
from .space import GridSpace, StateVector
from .stepper import InnerSolverConfig, SchemeConfig, Trajectory, implicit_step, run_batch, run_scheme
from .study import ConvergenceReport, error_metrics, fit_rate, heat_exact_oracle, run_study

__version__ = "0.1.0"

__all__ = [
    "GALLERY",
    "make_problem",
    "quasilinear_spec",
    "BrownianLattice",
    "coarsen",
    "generate",
    "DeclaredConstants",
    "EvolutionProblem",
    "ParabolicityError",
    "QuasilinearSpec",
    "assemble_quasilinear",
    "GridSpace",
    "StateVector",
    "InnerSolverConfig",
    "SchemeConfig",
    "Trajectory",
    "implicit_step",
    "run_batch",
    "run_scheme",
    "ConvergenceReport",
    "error_metrics",
    "fit_rate",
    "heat_exact_oracle",
    "run_study",
]
