"""Trajectory tracking for a wheeled robot with lattice piecewise-affine MPC laws.

The nonlinear kinematics are linearized along the reference, each point's
linear MPC is solved explicitly from its KKT conditions, and the resulting
control laws are compressed into max-min lattice expressions that are cheap
to evaluate online.
"""

from .kernels import BACKEND
from .kinematics import RobotParams, ReferenceTrajectory, generate_reference, linearize
from .lattice import LatticePWA, construct_from_samples, simplify
from .mpqp import MpcSettings, condense, explicit_law, solve_qp
from .controller import (
    LatticeController,
    SamplingPlan,
    Scenario,
    TrackingResult,
    build_explicit,
    offline_build,
    online_step,
    run_tracking,
)
from .config import ScenarioConfig, load_config
from .harness import ComparisonReport, run_compare, emit_plot_data

__version__ = "0.1.0"
