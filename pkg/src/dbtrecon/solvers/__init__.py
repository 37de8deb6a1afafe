"""Reconstruction solvers sharing one problem definition and history format."""
from .common import (  # noqa: F401
    IterationRecord,
    LambdaSchedule,
    Problem,
    ReconstructionResult,
    SolverError,
    check_stop,
    initial_volume,
    lambda_schedule,
    objective,
    objective_gradient,
)
from .cp import CpOptions, cp_reconstruct, project_dual_tv  # noqa: F401
from .fp import FpOptions, cg_solve, fp_hessian, fp_reconstruct  # noqa: F401
from .sgp import SgpOptions, bb_steplength, scaling_bound, scaling_entries, sgp_reconstruct  # noqa: F401

SOLVERS = ("sgp", "fp", "cp")
