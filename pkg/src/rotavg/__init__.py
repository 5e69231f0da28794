"""Stochastic iterative rotation averaging from relative-rotation
supervision: projective (MRP), SO(3), and quaternion algorithms with a
benchmark harness."""

from . import averaging, cli, envgraph, io, metrics, rotmath
from .averaging import (
    EstimateSet,
    OptimizerConfig,
    StepReport,
    expected_update,
    mrp_loss_and_grad,
    mrp_step,
    quaternion_step,
    run_averaging,
    so3_step,
    target_quaternion,
)
from .envgraph import (
    ConnectivityFailure,
    GeneratorConfig,
    RotationEnvironment,
    build_critical_env,
    evenly_spaced_rotations,
    generate_uniform_env,
    neighborhood_of,
)
from .metrics import (
    ConvergenceSummary,
    DegenerateAlignment,
    TraceRecord,
    absolute_error,
    align_gauge,
    avg_pairwise_error,
    nauc,
    relative_edge_error,
    steps_to_threshold,
)
from .rotmath import SouthPoleSingularity

__version__ = "0.1.0"
