"""Shape optimization of an obstacle in stationary incompressible flow.

A fixed reference mesh is deformed through a nonlinear extension operator
driven by a scalar boundary control; the pulled-back Navier-Stokes dissipation
is minimized with adjoint gradients, a box-constrained limited-memory BFGS
inner loop and an augmented Lagrange outer loop for the volume/barycenter
constraints. Linear systems are served by sparse LU or by BiCGStab
preconditioned with a geometric multigrid V-cycle on the red-refined mesh
hierarchy.
"""

__version__ = "0.1.0"

from .mesh import (
    INFLOW,
    OUTFLOW,
    WALL,
    OBSTACLE,
    DomainSpec,
    GridHierarchy,
    InvalidGeometryError,
    MeshFormatError,
    MeshLevel,
    boundary_vertices,
    fluid_area,
    generate_reference_mesh,
    hierarchy_from_base,
    load_base_fixture,
    read_mesh,
    refine_uniform,
    structured_mesh,
    write_mesh,
)
from .fem import (
    FemContext,
    build_dofmap,
    compute_transform,
    identity_transform,
)
from .forms import LagrangianState, ObjectiveParams
from .flow import InflowSpec, SolverConfig, solve_state
from .extension import ControlState, initial_control, solve_extension
from .levels import LevelStack
from .adjoint import GradientBundle, GradientEvaluator
from .optimizer import (
    CSV_HEADER,
    OptimizationDriver,
    OptimizationResult,
    OptimizerSettings,
    StepRecord,
)
from .config import ConfigError, RunConfig, load_config, parse_config
