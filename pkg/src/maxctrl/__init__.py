"""Exact-controllability control synthesis for discrete stochastic Maxwell systems."""

from .constraints import (
    ConstraintSystem,
    ResidualRecord,
    assemble_constraint_system,
    assemble_divergence_constraints,
    assemble_terminal_constraint,
    constraint_residual,
)
from .dynamics import (
    BrownianPath,
    SchemeMatrices,
    StateVector,
    Trajectory,
    assemble_scheme,
    discrete_energy,
    replay,
    sample_path,
    step,
)
from .errors import (
    CapExceeded,
    ConfigError,
    DimensionMismatch,
    MaxctrlError,
    SchurSingular,
    ShapeError,
    SingularM1,
)
from .grid import (
    ComponentLayout,
    DimMode,
    GridSpec,
    LayoutSet,
    build_layouts,
    critical_time,
    critical_time_from_box,
    yee_index,
    yee_multi_index,
)
from .lagrange import (
    AblationMode,
    ControlSolution,
    oracle_min_norm,
    solve_ablated,
    solve_min_norm,
)
from .operators3d import (
    OperatorSet,
    assemble_difference_block,
    assemble_divergence_blocks,
    assemble_operator_set,
    dump_block_csv,
)
from .tez2d import (
    AxisSwapMaps,
    TEzOperatorSet,
    assemble_tez,
    axis_swap_maps,
    tez_initial_fields,
    tez_initial_profiles,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
