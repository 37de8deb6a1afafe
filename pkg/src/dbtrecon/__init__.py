"""Iterative reconstruction for limited-angle digital breast tomosynthesis."""
from .geometry import (
    DetectorSpec,
    Geometry,
    GeometryError,
    SourceArc,
    VoxelGrid,
    build_geometry,
    desk_geometry,
    tiny_geometry,
)
from .projector import DenseOperator, Projector, back_project, build_dense_operator, forward_project
from .regularizers import RegularizerConfig, tv, tv_beta
from .solvers import Problem, ReconstructionResult, SolverError

__version__ = "0.1.0"
